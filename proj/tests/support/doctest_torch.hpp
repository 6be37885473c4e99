#pragma once

// torch brings its own CHECK macro; doctest's must win in test files.
#include <torch/torch.h>
#undef CHECK
#include <doctest.h>
