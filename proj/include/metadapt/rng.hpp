#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace metadapt {

// A seeded random stream with a derivation path. Children are derived from
// the path alone, so child(i) never depends on how much of the parent stream
// has been consumed. That makes per-task and per-trajectory streams
// independent of scheduling order.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed = 0) : path_{seed} { reseed(); }

  RngStream(std::uint64_t seed, std::initializer_list<std::uint64_t> tail) : path_{seed} {
    path_.insert(path_.end(), tail.begin(), tail.end());
    reseed();
  }

  [[nodiscard]] RngStream child(std::uint64_t index) const {
    RngStream out(*this, index);
    return out;
  }

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  double normal() { return normal_(engine_); }
  std::uint64_t next_u64() { return engine_(); }

  [[nodiscard]] const std::vector<std::uint64_t>& path() const { return path_; }

 private:
  RngStream(const RngStream& parent, std::uint64_t index) : path_(parent.path_) {
    path_.push_back(index);
    reseed();
  }

  void reseed() {
    std::vector<std::uint32_t> words;
    words.reserve(path_.size() * 2);
    for (std::uint64_t v : path_) {
      words.push_back(static_cast<std::uint32_t>(v));
      words.push_back(static_cast<std::uint32_t>(v >> 32));
    }
    std::seed_seq seq(words.begin(), words.end());
    engine_.seed(seq);
    normal_.reset();
  }

  std::vector<std::uint64_t> path_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

// Purpose tags for derived streams.
namespace streams {
inline constexpr std::uint64_t kInit = 1;
inline constexpr std::uint64_t kTasks = 2;
inline constexpr std::uint64_t kIteration = 3;
inline constexpr std::uint64_t kAdapt = 4;
inline constexpr std::uint64_t kPost = 5;
inline constexpr std::uint64_t kEval = 6;
inline constexpr std::uint64_t kSafety = 7;
inline constexpr std::uint64_t kSweep = 8;
inline constexpr std::uint64_t kSpecialist = 9;
}  // namespace streams

}  // namespace metadapt
