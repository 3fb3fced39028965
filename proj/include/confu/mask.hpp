#pragma once

#include <cstdint>
#include <vector>

#include "confu/error.hpp"

namespace confu {

// Dense boolean attention mask, true = query row may attend to key column.
class AttentionMask {
 public:
  AttentionMask() = default;
  AttentionMask(std::size_t q_len, std::size_t k_len, bool fill = false)
      : q_(q_len), k_(k_len), bits_(q_len * k_len, fill ? 1 : 0) {}

  static AttentionMask causal(std::size_t n) {
    AttentionMask m(n, n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j <= i; ++j) m.set(i, j, true);
    return m;
  }

  // Causal over an existing prefix of `past` keys: key layout [past | new n].
  static AttentionMask causal_with_past(std::size_t n, std::size_t past) {
    AttentionMask m(n, past + n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j <= past + i; ++j) m.set(i, j, true);
    return m;
  }

  std::size_t q_len() const { return q_; }
  std::size_t k_len() const { return k_; }

  bool at(std::size_t q, std::size_t k) const { return bits_[q * k_ + k] != 0; }
  void set(std::size_t q, std::size_t k, bool v) { bits_[q * k_ + k] = v ? 1 : 0; }

  void set_row(std::size_t q, bool v) {
    for (std::size_t k = 0; k < k_; ++k) set(q, k, v);
  }

  bool row_has_any(std::size_t q) const {
    for (std::size_t k = 0; k < k_; ++k)
      if (at(q, k)) return true;
    return false;
  }

  void require_every_row_attends() const {
    for (std::size_t q = 0; q < q_; ++q)
      if (!row_has_any(q)) throw MaskError("query row " + std::to_string(q) + " attends to nothing");
  }

  bool operator==(const AttentionMask& o) const {
    return q_ == o.q_ && k_ == o.k_ && bits_ == o.bits_;
  }

 private:
  std::size_t q_ = 0, k_ = 0;
  std::vector<std::uint8_t> bits_;
};

}  // namespace confu
