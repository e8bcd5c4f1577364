#pragma once

// Wall-time attribution to the five transformer components. Scopes are
// no-ops unless a Profiler is active on the current thread; nested scopes
// charge time to the innermost component only.

#include <array>
#include <chrono>
#include <cstddef>
#include <string_view>
#include <vector>

namespace mdn {

enum class Component : std::size_t {
  EncoderAttention = 0,
  EncoderFfn,
  DecoderAttention,
  DecoderFfn,
  OutputProjection,
};
inline constexpr std::size_t kNumComponents = 5;

inline constexpr std::array<std::string_view, kNumComponents> kComponentKeys = {
    "encoder_attention", "encoder_ffn", "decoder_attention", "decoder_ffn",
    "output_projection"};

class Profiler {
 public:
  using Clock = std::chrono::steady_clock;

  void enter(Component c) {
    const auto now = Clock::now();
    if (!stack_.empty()) charge(now);
    stack_.push_back(c);
    last_ = now;
  }

  void exit() {
    const auto now = Clock::now();
    charge(now);
    stack_.pop_back();
    last_ = now;
  }

  double seconds(Component c) const { return seconds_[static_cast<std::size_t>(c)]; }
  const std::array<double, kNumComponents>& all() const { return seconds_; }
  void reset() { seconds_.fill(0.0); }

 private:
  void charge(Clock::time_point now) {
    seconds_[static_cast<std::size_t>(stack_.back())] +=
        std::chrono::duration<double>(now - last_).count();
  }

  std::array<double, kNumComponents> seconds_{};
  std::vector<Component> stack_;
  Clock::time_point last_{};
};

namespace detail {
inline Profiler*& active_profiler() {
  thread_local Profiler* p = nullptr;
  return p;
}
}  // namespace detail

// Makes `p` the current thread's profiler for the guard's lifetime.
class ProfilerActivation {
 public:
  explicit ProfilerActivation(Profiler& p) : previous_(detail::active_profiler()) {
    detail::active_profiler() = &p;
  }
  ~ProfilerActivation() { detail::active_profiler() = previous_; }
  ProfilerActivation(const ProfilerActivation&) = delete;
  ProfilerActivation& operator=(const ProfilerActivation&) = delete;

 private:
  Profiler* previous_;
};

class ProfileScope {
 public:
  explicit ProfileScope(Component c) : p_(detail::active_profiler()) {
    if (p_) p_->enter(c);
  }
  ~ProfileScope() {
    if (p_) p_->exit();
  }
  ProfileScope(const ProfileScope&) = delete;
  ProfileScope& operator=(const ProfileScope&) = delete;

 private:
  Profiler* p_;
};

}  // namespace mdn
