#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "ul/tensor.hpp"

namespace ul {

// All randomness in a run funnels through one root seed. Sub-streams are
// derived by hashing (seed, role, index) so that the draws consumed by
// different parts of a training step are independent by construction and
// reconstructable in tests.
uint64_t derive_seed(uint64_t root, std::string_view role, uint64_t index = 0);

class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    // [0, 1), 53-bit resolution
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    // Box-Muller with cached spare; bit-reproducible for a fixed seed on one platform.
    double normal();

    uint64_t bits() { return gen_(); }

    int uniform_int(int n);

    void fill_normal(Tensor& t) {
        for (double& v : t.data) v = normal();
    }

    Tensor normal_tensor(std::vector<int> shape) {
        Tensor t = Tensor::zeros(std::move(shape));
        fill_normal(t);
        return t;
    }

private:
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace ul
