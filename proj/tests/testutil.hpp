#pragma once

#include "hybridvfl/rng.hpp"
#include "hybridvfl/tensor.hpp"

namespace hvfl::testutil {

inline Tensor rand_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

inline Shape rand_shape2(Rng& rng, std::size_t max_dim = 8) {
    return {1 + rng.below(max_dim), 1 + rng.below(max_dim)};
}

}  // namespace hvfl::testutil
