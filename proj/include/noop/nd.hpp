#pragma once

#include "noop/nd/adam.hpp"
#include "noop/nd/checkpoint.hpp"
#include "noop/nd/gradcheck.hpp"
#include "noop/nd/graph.hpp"
#include "noop/nd/layers.hpp"
#include "noop/nd/ops.hpp"
#include "noop/nd/random.hpp"
#include "noop/nd/tensor.hpp"
