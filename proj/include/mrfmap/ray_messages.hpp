#pragma once

// Sum-product messages of a single ray depth potential.
//
// A ray crossing cells 0..N-1 couples their binary occupancies with a depth variable whose
// value is the index of the first occupied cell. The factor takes value nu[i] when cell i is the
// first occupied one and zero otherwise (including the all-empty configuration). Exploiting that
// structure, every outgoing message is a prefix/suffix scan along the ray.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "mrfmap/error.hpp"

namespace mrfmap {

/// Two-state message (weight of o = 0, weight of o = 1).
struct MessagePair {
  double m0 = 0.5;
  double m1 = 0.5;

  static constexpr MessagePair uniform() { return {0.5, 0.5}; }

  double sum() const { return m0 + m1; }

  /// Scales to unit sum. Returns false (and leaves *this uniform) when both weights vanish or the
  /// pair is not finite.
  bool normalize() {
    const double s = m0 + m1;
    if (!(s > 0) || !std::isfinite(s)) {
      *this = uniform();
      return false;
    }
    m0 /= s;
    m1 /= s;
    return true;
  }

  MessagePair normalized() const {
    MessagePair p = *this;
    p.normalize();
    return p;
  }

  bool operator==(const MessagePair&) const = default;
};

/// Message from the ray factor to its depth variable: out[i] = nu[i] mu_i(1) prod_{k<i} mu_k(0).
inline void depth_message(std::span<const double> nu, std::span<const MessagePair> incoming, std::span<double> out) {
  if (nu.size() != incoming.size() || out.size() != nu.size())
    throw Error(ErrorKind::InvalidArgument, "depth_message: size mismatch");
  double visible = 1.0;
  for (std::size_t i = 0; i < nu.size(); ++i) {
    out[i] = nu[i] * incoming[i].m1 * visible;
    visible *= incoming[i].m0;
  }
}

inline std::vector<double> depth_message(std::span<const double> nu, std::span<const MessagePair> incoming) {
  std::vector<double> out(nu.size());
  depth_message(nu, incoming, out);
  return out;
}

/// Unnormalized factor-to-occupancy messages, out[i] = (weight of o_i = 0, weight of o_i = 1).
///
///   pos[i] = F[i] + nu[i] P[i]
///   neg[i] = F[i] + P[i] sum_{j>i} mu_j(1) nu[j] prod_{i<k<j} mu_k(0)
///
/// with P[i] = prod_{k<i} mu_k(0) and F[i] = sum_{j<i} mu_j(1) nu[j] P[j]. The second term of neg
/// never divides by mu_i(0), so fully occluding inputs are handled exactly.
inline void occupancy_messages_raw(std::span<const double> nu, std::span<const MessagePair> incoming,
                                   std::span<MessagePair> out) {
  const std::size_t n = nu.size();
  if (incoming.size() != n || out.size() != n)
    throw Error(ErrorKind::InvalidArgument, "occupancy_messages: size mismatch");
  double behind = 0.0;
  for (std::size_t i = n; i-- > 0;) {
    out[i].m0 = behind;
    behind = incoming[i].m1 * nu[i] + incoming[i].m0 * behind;
  }
  double visible = 1.0;
  double before = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double neg = before + visible * out[i].m0;
    const double pos = before + visible * nu[i];
    out[i] = {neg, pos};
    before += incoming[i].m1 * nu[i] * visible;
    visible *= incoming[i].m0;
  }
}

/// Normalized outgoing occupancy messages. Pairs whose weights both vanish become uniform and
/// are counted in `degenerate`.
inline void occupancy_messages(std::span<const double> nu, std::span<const MessagePair> incoming,
                               std::span<MessagePair> out, std::uint64_t* degenerate = nullptr) {
  occupancy_messages_raw(nu, incoming, out);
  for (auto& m : out) {
    if (!m.normalize() && degenerate) ++*degenerate;
  }
}

inline std::vector<MessagePair> occupancy_messages(std::span<const double> nu, std::span<const MessagePair> incoming,
                                                   std::uint64_t* degenerate = nullptr) {
  std::vector<MessagePair> out(nu.size());
  occupancy_messages(nu, incoming, out, degenerate);
  return out;
}

struct OracleMessages {
  std::vector<double> depth;
  std::vector<MessagePair> occupancy;  // unnormalized
};

inline constexpr std::size_t kOracleMaxCells = 12;

/// Exact marginalisation by enumerating all 2^N occupancy configurations of the ray. Independent of
/// the scans above; intended as a reference for them.
inline OracleMessages brute_force_oracle(std::span<const double> nu, std::span<const MessagePair> incoming) {
  const std::size_t n = nu.size();
  if (incoming.size() != n) throw Error(ErrorKind::InvalidArgument, "brute_force_oracle: size mismatch");
  if (n > kOracleMaxCells) throw Error(ErrorKind::TooLarge, "brute_force_oracle supports at most 12 cells");
  OracleMessages out;
  out.depth.assign(n, 0.0);
  out.occupancy.assign(n, MessagePair{0.0, 0.0});
  const std::uint32_t configs = 1u << n;
  for (std::uint32_t c = 0; c < configs; ++c) {
    // Factor value: nu of the first occupied cell; zero when the ray hits nothing.
    std::size_t first = n;
    for (std::size_t i = 0; i < n; ++i) {
      if (c & (1u << i)) {
        first = i;
        break;
      }
    }
    if (first == n) continue;
    const double psi = nu[first];
    auto weight_of = [&](std::size_t i) {
      return (c & (1u << i)) ? incoming[i].m1 : incoming[i].m0;
    };
    double all = psi;
    for (std::size_t j = 0; j < n; ++j) all *= weight_of(j);
    out.depth[first] += all;
    for (std::size_t i = 0; i < n; ++i) {
      double w = psi;
      for (std::size_t j = 0; j < n; ++j)
        if (j != i) w *= weight_of(j);
      if (c & (1u << i))
        out.occupancy[i].m1 += w;
      else
        out.occupancy[i].m0 += w;
    }
  }
  return out;
}

}  // namespace mrfmap
