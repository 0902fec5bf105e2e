// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "mvad/checkpoint.hpp"
#include "mvad/core.hpp"
#include "mvad/data.hpp"
#include "mvad/evaluation.hpp"
#include "mvad/losses.hpp"
#include "mvad/masking.hpp"
#include "mvad/model.hpp"
#include "mvad/png_io.hpp"
#include "mvad/scoring.hpp"
#include "mvad/training.hpp"
