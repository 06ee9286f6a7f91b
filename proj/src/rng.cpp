#include "ul/rng.hpp"

#include <cmath>

namespace ul {

namespace {

uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

uint64_t fnv1a(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace

uint64_t derive_seed(uint64_t root, std::string_view role, uint64_t index) {
    uint64_t h = splitmix64(root ^ fnv1a(role));
    return splitmix64(h ^ (index * 0xd1342543de82ef95ULL + 1));
}

double Rng::normal() {
    if (have_spare_) {
        have_spare_ = false;
        return spare_;
    }
    // u1 in (0, 1] so the log is finite
    double u1 = 1.0 - uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
}

int Rng::uniform_int(int n) {
    if (n <= 0) throw std::invalid_argument("Rng::uniform_int: n must be positive");
    // rejection sampling keeps the distribution exactly uniform
    uint64_t bound = UINT64_MAX - UINT64_MAX % static_cast<uint64_t>(n);
    uint64_t x;
    do {
        x = gen_();
    } while (x >= bound);
    return static_cast<int>(x % static_cast<uint64_t>(n));
}

}  // namespace ul
