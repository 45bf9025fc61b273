#pragma once

// libtorch's logging header defines CHECK; Catch2 must own that name.
#include <torch/torch.h>
#undef CHECK
#include <catch_amalgamated.hpp>
