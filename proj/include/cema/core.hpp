#ifndef CEMA_CORE_HPP
#define CEMA_CORE_HPP

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace cema {

constexpr int kFps = 20;
constexpr double kDt = 1.0 / kFps;

using Vec2 = Eigen::Vector2d;
using AgentId = int;

// Exit code 2 at the CLI.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Exit code 3 at the CLI.
class DegenerateError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Maneuver { LaneFollow, LaneChangeLeft, LaneChangeRight, TurnLeft, TurnRight, GiveWay, Stop };
enum class Macro { Continue, ChangeLeft, ChangeRight, Exit, Stop };

inline constexpr Maneuver kAllManeuvers[] = {Maneuver::LaneFollow,     Maneuver::LaneChangeLeft,
                                             Maneuver::LaneChangeRight, Maneuver::TurnLeft,
                                             Maneuver::TurnRight,      Maneuver::GiveWay,
                                             Maneuver::Stop};
inline constexpr Macro kAllMacros[] = {Macro::Continue, Macro::ChangeLeft, Macro::ChangeRight, Macro::Exit,
                                       Macro::Stop};

std::string_view to_string(Maneuver m);
std::string_view to_string(Macro m);
bool parse_maneuver(std::string_view s, Maneuver& out);
bool parse_macro(std::string_view s, Macro& out);
bool is_action_name(std::string_view s);

inline double wrap_angle(double a) {
  a = std::fmod(a + M_PI, 2.0 * M_PI);
  if (a <= 0.0) a += 2.0 * M_PI;
  return a - M_PI;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
  return splitmix64(seed ^ splitmix64(tag + 0x632BE59BD9B4E019ULL));
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// std distributions are implementation-defined; these draws are not.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(splitmix64(seed)) {}

  std::uint64_t next() {
    state_ += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  std::size_t below(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n; }

  std::size_t categorical(const std::vector<double>& p) {
    double total = 0.0;
    for (double x : p) total += x;
    double u = uniform() * total;
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (u < p[i]) return i;
      u -= p[i];
    }
    for (std::size_t i = p.size(); i-- > 0;)
      if (p[i] > 0.0) return i;
    return 0;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
  }

 private:
  std::uint64_t state_;
};

}  // namespace cema

#endif
