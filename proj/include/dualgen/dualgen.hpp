// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "dualgen/autodiff.hpp"
#include "dualgen/bleu.hpp"
#include "dualgen/checkpoint.hpp"
#include "dualgen/config.hpp"
#include "dualgen/corruption.hpp"
#include "dualgen/data.hpp"
#include "dualgen/decode.hpp"
#include "dualgen/gradcheck.hpp"
#include "dualgen/model.hpp"
#include "dualgen/objectives.hpp"
#include "dualgen/optim.hpp"
#include "dualgen/rng.hpp"
#include "dualgen/train.hpp"
#include "dualgen/vision.hpp"
