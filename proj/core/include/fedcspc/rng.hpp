#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace fedcspc {

using Rng = std::mt19937_64;

// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Order-sensitive combination of seed components into one stream seed.
constexpr std::uint64_t derive_seed(std::initializer_list<std::uint64_t> parts) {
    std::uint64_t h = 0x6a09e667f3bcc908ULL;
    for (auto p : parts) h = mix64(h ^ mix64(p));
    return h;
}

// Named stream tags so that independent consumers never share a sequence.
enum class Stream : std::uint64_t {
    data = 1,
    partition,
    init,
    participation,
    client,
    server,
};

constexpr std::uint64_t stream_seed(std::uint64_t seed, Stream s, std::uint64_t round = 0, std::uint64_t client = 0) {
    return derive_seed({seed, static_cast<std::uint64_t>(s), round, client});
}

}  // namespace fedcspc
