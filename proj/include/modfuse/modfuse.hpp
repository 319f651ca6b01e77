// SPDX-License-Identifier: Apache-2.0
//
// Umbrella header for the library. The CLI front end lives in cli.hpp and is
// not included here so library users do not pull in the argument parser.
#pragma once

#include "modfuse/autodiff.hpp"
#include "modfuse/checkpoint.hpp"
#include "modfuse/config.hpp"
#include "modfuse/datagen.hpp"
#include "modfuse/encoders.hpp"
#include "modfuse/error.hpp"
#include "modfuse/fusion.hpp"
#include "modfuse/metrics.hpp"
#include "modfuse/optim.hpp"
#include "modfuse/random.hpp"
#include "modfuse/sweep.hpp"
#include "modfuse/tensor.hpp"
