#pragma once

// Umbrella header for the whole toolkit.

#include "sgpt/eval.hpp"
#include "sgpt/io.hpp"
#include "sgpt/metrics.hpp"
#include "sgpt/model.hpp"
#include "sgpt/rng.hpp"
#include "sgpt/surgery.hpp"
#include "sgpt/tensor.hpp"
#include "sgpt/trainer.hpp"
