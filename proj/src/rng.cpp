#include "segkit/rng.hpp"

namespace segkit {

namespace {

// FNV-1a over a byte, then a splitmix64 finalizer for avalanche.
inline uint64_t mix_byte(uint64_t h, unsigned char b) {
  h ^= b;
  h *= 0x100000001b3ULL;
  return h;
}

inline uint64_t final_mix(uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

uint64_t derive_seed(uint64_t seed, std::string_view purpose, uint64_t a, uint64_t b) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (int i = 0; i < 8; ++i) h = mix_byte(h, static_cast<unsigned char>(seed >> (8 * i)));
  for (char c : purpose) h = mix_byte(h, static_cast<unsigned char>(c));
  for (int i = 0; i < 8; ++i) h = mix_byte(h, static_cast<unsigned char>(a >> (8 * i)));
  for (int i = 0; i < 8; ++i) h = mix_byte(h, static_cast<unsigned char>(b >> (8 * i)));
  return final_mix(h);
}

}  // namespace segkit
