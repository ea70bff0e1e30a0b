// Copyright 2026 The tsdiffuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "tsdiffuse/autograd.hpp"
#include "tsdiffuse/checkpoint_io.hpp"
#include "tsdiffuse/commands.hpp"
#include "tsdiffuse/conditioner.hpp"
#include "tsdiffuse/config.hpp"
#include "tsdiffuse/dataset_forge.hpp"
#include "tsdiffuse/denoiser.hpp"
#include "tsdiffuse/diffusion.hpp"
#include "tsdiffuse/error.hpp"
#include "tsdiffuse/eval_harness.hpp"
#include "tsdiffuse/model.hpp"
#include "tsdiffuse/plot.hpp"
#include "tsdiffuse/records.hpp"
#include "tsdiffuse/rng.hpp"
#include "tsdiffuse/training.hpp"
