#pragma once

// Umbrella header: the whole library.

#include "ftx/error.hpp"
#include "ftx/gradcheck.hpp"
#include "ftx/infer.hpp"
#include "ftx/io.hpp"
#include "ftx/layers.hpp"
#include "ftx/models.hpp"
#include "ftx/persist.hpp"
#include "ftx/rng.hpp"
#include "ftx/tensor.hpp"
#include "ftx/tokenizer.hpp"
#include "ftx/train.hpp"
#include "ftx/types.hpp"
