#pragma once

// Umbrella header.

#include "attention.hpp"
#include "augment.hpp"
#include "checkpoint.hpp"
#include "config_file.hpp"
#include "dataset.hpp"
#include "embedding.hpp"
#include "eval.hpp"
#include "gradcheck.hpp"
#include "model.hpp"
#include "model_gradcheck.hpp"
#include "optim.hpp"
#include "synth.hpp"
#include "tensor.hpp"
#include "training.hpp"
