#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace a2q {

using i32 = std::int32_t;
using i64 = std::int64_t;
using u32 = std::uint32_t;
using u64 = std::uint64_t;

// Thrown for contract violations: bad arguments, malformed files,
// incompatible shapes. The CLI maps these to exit code 1.
class error : public std::runtime_error {
public:
    explicit error(const std::string& msg) : std::runtime_error(msg) {}
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw error(msg);
}

// Smallest admissible quantization step size.
inline constexpr double kStepMin = 1e-8;

// Bitwidth bounds. Signed quantizers need at least one magnitude bit
// beyond the sign, unsigned quantizers can go down to a single bit.
inline constexpr double kBitMinSigned = 2.0;
inline constexpr double kBitMinUnsigned = 1.0;
inline constexpr double kBitMax = 8.0;

} // namespace a2q
