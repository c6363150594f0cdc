#pragma once

// Umbrella header.

#include "kpbev/boxes.hpp"
#include "kpbev/config.hpp"
#include "kpbev/detector.hpp"
#include "kpbev/encoders.hpp"
#include "kpbev/eval.hpp"
#include "kpbev/geom.hpp"
#include "kpbev/gradcheck.hpp"
#include "kpbev/io.hpp"
#include "kpbev/kpconv.hpp"
#include "kpbev/multiscale.hpp"
#include "kpbev/ops.hpp"
#include "kpbev/random.hpp"
#include "kpbev/scene.hpp"
#include "kpbev/tensor.hpp"
#include "kpbev/train.hpp"
