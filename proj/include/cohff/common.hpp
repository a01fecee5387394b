#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>

namespace cohff {

// 0 = empty, 1..12 = semantic classes.
inline constexpr int kNumClasses = 13;

enum class SemanticClass : uint8_t {
  Empty = 0,
  Building = 1,
  Fence = 2,
  Terrain = 3,
  Pole = 4,
  Road = 5,
  SideWalk = 6,
  Vegetation = 7,
  Vehicles = 8,
  Wall = 9,
  GuardRail = 10,
  TrafficSigns = 11,
  Bridge = 12,
};

inline constexpr uint8_t kEmpty = 0;
inline constexpr uint8_t kVehicles = static_cast<uint8_t>(SemanticClass::Vehicles);

inline const char* class_name(uint8_t id) {
  static constexpr std::array<const char*, kNumClasses> names = {
      "empty",      "building", "fence",      "terrain", "pole",
      "road",       "sidewalk", "vegetation", "vehicles", "wall",
      "guard_rail", "traffic_signs", "bridge"};
  return id < kNumClasses ? names[id] : "invalid";
}

inline constexpr double kPi = 3.14159265358979323846;

inline double deg2rad(double d) { return d * kPi / 180.0; }
inline double rad2deg(double r) { return r * 180.0 / kPi; }

// Normalizes an angle to (-pi, pi].
inline double normalize_angle(double a) {
  a = std::fmod(a, 2.0 * kPi);
  if (a <= -kPi) a += 2.0 * kPi;
  else if (a > kPi) a -= 2.0 * kPi;
  return a;
}

// Deterministic RNG. mt19937_64 has a standard-fixed output sequence and the
// uniform/gaussian transforms below avoid the implementation-defined library
// distributions, so streams are reproducible across platforms.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // [0, 1)
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // inclusive range
  int uniform_int(int lo, int hi) {
    return lo + static_cast<int>(gen_() % static_cast<uint64_t>(hi - lo + 1));
  }

  // Box-Muller, one spare cached.
  double gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double mag = std::sqrt(-2.0 * std::log(u1));
    spare_ = mag * std::sin(2.0 * kPi * u2);
    has_spare_ = true;
    return mag * std::cos(2.0 * kPi * u2);
  }

  double gaussian(double mean, double stddev) { return mean + stddev * gaussian(); }

 private:
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace cohff
