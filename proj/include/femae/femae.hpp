#pragma once

// Umbrella header for the whole library.

#include "femae/autodiff.hpp"
#include "femae/checkpoint.hpp"
#include "femae/config.hpp"
#include "femae/data.hpp"
#include "femae/errors.hpp"
#include "femae/eval.hpp"
#include "femae/geometry.hpp"
#include "femae/model_config.hpp"
#include "femae/network.hpp"
#include "femae/optim.hpp"
#include "femae/patchmask.hpp"
#include "femae/tensor.hpp"
#include "femae/training.hpp"
