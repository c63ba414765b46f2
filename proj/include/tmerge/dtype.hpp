#pragma once

#include <bit>
#include <cstdint>
#include <string>
#include <string_view>

#include "tmerge/error.hpp"

namespace tmerge {

// Storage dtypes. All computation happens in float32; these only describe
// how tensor payloads are laid out on disk.
enum class DType { F32, BF16, F16 };

constexpr std::size_t dtype_size(DType d) {
    return d == DType::F32 ? 4 : 2;
}

constexpr std::string_view dtype_tag(DType d) {
    switch (d) {
        case DType::F32: return "f32";
        case DType::BF16: return "bf16";
        case DType::F16: return "f16";
    }
    return "f32";
}

inline DType dtype_from_tag(std::string_view tag) {
    if (tag == "f32") return DType::F32;
    if (tag == "bf16") return DType::BF16;
    if (tag == "f16") return DType::F16;
    throw user_error("unknown dtype tag '" + std::string(tag) + "'");
}

// safetensors spells its dtypes in upper case.
inline DType dtype_from_safetensors(std::string_view tag) {
    if (tag == "F32") return DType::F32;
    if (tag == "BF16") return DType::BF16;
    if (tag == "F16") return DType::F16;
    throw user_error("unknown dtype tag '" + std::string(tag) + "'");
}

// float32 -> bfloat16, round to nearest even.
inline std::uint16_t f32_to_bf16(float f) {
    std::uint32_t x = std::bit_cast<std::uint32_t>(f);
    if ((x & 0x7FFFFFFFu) > 0x7F800000u) {
        // NaN: keep it a NaN, force the quiet bit.
        return static_cast<std::uint16_t>((x >> 16) | 0x0040u);
    }
    std::uint32_t bias = 0x7FFFu + ((x >> 16) & 1u);
    return static_cast<std::uint16_t>((x + bias) >> 16);
}

inline float bf16_to_f32(std::uint16_t h) {
    return std::bit_cast<float>(static_cast<std::uint32_t>(h) << 16);
}

// float32 -> float16, round to nearest even, overflow to inf,
// underflow through subnormals to zero.
inline std::uint16_t f32_to_f16(float f) {
    std::uint32_t x = std::bit_cast<std::uint32_t>(f);
    std::uint32_t sign = (x >> 16) & 0x8000u;
    std::uint32_t exp = (x >> 23) & 0xFFu;
    std::uint32_t mant = x & 0x7FFFFFu;

    if (exp == 0xFFu) {
        std::uint32_t payload = mant ? (0x200u | (mant >> 13)) : 0u;
        return static_cast<std::uint16_t>(sign | 0x7C00u | payload);
    }

    int e = static_cast<int>(exp) - 127 + 15;
    if (e >= 0x1F) return static_cast<std::uint16_t>(sign | 0x7C00u);
    if (e <= 0) {
        if (e < -10) return static_cast<std::uint16_t>(sign);
        mant |= 0x800000u;
        std::uint32_t shift = static_cast<std::uint32_t>(14 - e);
        std::uint32_t half = mant >> shift;
        std::uint32_t rem = mant & ((1u << shift) - 1u);
        std::uint32_t halfway = 1u << (shift - 1u);
        if (rem > halfway || (rem == halfway && (half & 1u))) half++;
        return static_cast<std::uint16_t>(sign | half);
    }

    std::uint16_t half =
        static_cast<std::uint16_t>(sign | (static_cast<std::uint32_t>(e) << 10) | (mant >> 13));
    std::uint32_t rem = mant & 0x1FFFu;
    // Round up may carry into the exponent; the bit layout makes that correct
    // (mantissa overflow bumps the exponent, 0x7BFF + 1 = inf).
    if (rem > 0x1000u || (rem == 0x1000u && (half & 1u))) half++;
    return half;
}

inline float f16_to_f32(std::uint16_t h) {
    std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
    std::uint32_t exp = (h >> 10) & 0x1Fu;
    std::uint32_t mant = h & 0x3FFu;
    std::uint32_t x;
    if (exp == 0) {
        if (mant == 0) {
            x = sign;
        } else {
            int e = -1;
            do {
                mant <<= 1;
                e++;
            } while (!(mant & 0x400u));
            mant &= 0x3FFu;
            x = sign | (static_cast<std::uint32_t>(112 - e) << 23) | (mant << 13);
        }
    } else if (exp == 0x1Fu) {
        x = sign | 0x7F800000u | (mant << 13);
    } else {
        x = sign | ((exp - 15 + 127) << 23) | (mant << 13);
    }
    return std::bit_cast<float>(x);
}

}  // namespace tmerge
