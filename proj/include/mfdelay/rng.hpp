#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

namespace mfdelay {

/// Philox4x32-10 block function (Salmon et al. counter-based generator).
/// Stateless: the output depends only on (counter, key).
class Philox4x32 {
 public:
  using Counter = std::array<std::uint32_t, 4>;
  using Key = std::array<std::uint32_t, 2>;

  static Counter block(Counter c, Key k) noexcept {
    for (int round = 0; round < 10; ++round) {
      c = single_round(c, k);
      k[0] += kWeyl0;
      k[1] += kWeyl1;
    }
    return c;
  }

 private:
  static constexpr std::uint32_t kMul0 = 0xD2511F53u;
  static constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
  static constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
  static constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

  static Counter single_round(const Counter& c, const Key& k) noexcept {
    const std::uint64_t p0 = static_cast<std::uint64_t>(kMul0) * c[0];
    const std::uint64_t p1 = static_cast<std::uint64_t>(kMul1) * c[2];
    const auto hi0 = static_cast<std::uint32_t>(p0 >> 32), lo0 = static_cast<std::uint32_t>(p0);
    const auto hi1 = static_cast<std::uint32_t>(p1 >> 32), lo1 = static_cast<std::uint32_t>(p1);
    return {hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0};
  }
};

/// Brownian increments keyed on (seed, particle, step): N(0, dt I_w) per draw.
/// `offset` shifts particle ids so a single-particle run can reuse particle i's substream.
class NoiseBank {
 public:
  NoiseBank() = default;
  NoiseBank(std::uint64_t seed, double dt, std::size_t w, std::uint64_t offset = 0)
      : seed_(seed), dt_(dt), sqrt_dt_(std::sqrt(dt)), w_(w), offset_(offset) {}

  std::uint64_t seed() const noexcept { return seed_; }
  double dt() const noexcept { return dt_; }
  std::size_t w() const noexcept { return w_; }
  std::uint64_t offset() const noexcept { return offset_; }

  /// Writes the w increments of (particle, step) into out.
  void increment(std::uint64_t particle, std::uint64_t step, double* out) const noexcept {
    const std::uint64_t id = particle + offset_;
    const Philox4x32::Key key{static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32)};
    for (std::size_t b = 0; 2 * b < w_; ++b) {
      const Philox4x32::Counter ctr{static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(b),
                                    static_cast<std::uint32_t>(id), static_cast<std::uint32_t>(id >> 32)};
      const auto r = Philox4x32::block(ctr, key);
      // 53-bit uniforms in (0, 1]
      const double u1 = (static_cast<double>((static_cast<std::uint64_t>(r[0]) << 21) ^ (r[1] >> 11)) + 1.0) * 0x1p-53;
      const double u2 = (static_cast<double>((static_cast<std::uint64_t>(r[2]) << 21) ^ (r[3] >> 11)) + 0.5) * 0x1p-53;
      const double rad = std::sqrt(-2.0 * std::log(u1));
      const double ang = 2.0 * std::numbers::pi * u2;
      out[2 * b] = sqrt_dt_ * rad * std::cos(ang);
      if (2 * b + 1 < w_) out[2 * b + 1] = sqrt_dt_ * rad * std::sin(ang);
    }
  }

 private:
  std::uint64_t seed_ = 0;
  double dt_ = 1.0;
  double sqrt_dt_ = 1.0;
  std::size_t w_ = 1;
  std::uint64_t offset_ = 0;
};

}  // namespace mfdelay
