#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <compare>
#include <cstdint>
#include <cstdlib>
#include <limits>
#include <string>
#include <string_view>

#include "exameval/error.hpp"

namespace exameval {

/// Fixed-point decimal with six fractional digits.
///
/// Points and awards are stored as integer micro-points so that sums such as
/// 1035.5 are exact no matter how many statements contribute. Maximum points
/// live on the half-point grid (see `is_half_multiple`); awards may be finer.
class Decimal {
public:
    static constexpr std::int64_t kScale = 1'000'000;
    static constexpr std::int64_t kHalf = kScale / 2;

    constexpr Decimal() = default;

    static constexpr Decimal from_micros(std::int64_t micros) {
        Decimal d;
        d.micros_ = micros;
        return d;
    }
    static constexpr Decimal from_int(std::int64_t whole) { return from_micros(whole * kScale); }
    static constexpr Decimal from_half_units(std::int64_t halves) { return from_micros(halves * kHalf); }

    /// Rounds to the nearest micro-point. JSON numbers arrive as doubles; every
    /// value with at most six decimals survives this conversion unchanged.
    static Decimal from_double(double v) {
        if (!std::isfinite(v)) throw InputError("non-finite number");
        const double scaled = std::round(v * static_cast<double>(kScale));
        if (std::fabs(scaled) > 9.0e18) throw InputError("number out of range");
        return from_micros(static_cast<std::int64_t>(scaled));
    }

    /// Parses "12", "-0.5", "1,25" (German decimal comma accepted). More than
    /// six fractional digits are rounded half away from zero.
    static Decimal parse(std::string_view text) {
        std::string s;
        for (char c : text) {
            if (c == ' ' || c == '\t' || c == '\n' || c == '\r') continue;
            s.push_back(c == ',' ? '.' : c);
        }
        if (s.empty()) throw InputError("empty decimal");
        bool neg = false;
        std::size_t pos = 0;
        if (s[0] == '-' || s[0] == '+') {
            neg = s[0] == '-';
            pos = 1;
        }
        std::int64_t whole = 0;
        std::int64_t frac = 0;
        int frac_digits = 0;
        bool seen_dot = false;
        bool any_digit = false;
        bool round_up = false;
        for (; pos < s.size(); ++pos) {
            const char c = s[pos];
            if (c == '.') {
                if (seen_dot) throw InputError("malformed decimal: " + std::string(text));
                seen_dot = true;
                continue;
            }
            if (c < '0' || c > '9') throw InputError("malformed decimal: " + std::string(text));
            any_digit = true;
            const int digit = c - '0';
            if (!seen_dot) {
                if (whole > (std::numeric_limits<std::int64_t>::max() / kScale) / 10)
                    throw InputError("decimal out of range: " + std::string(text));
                whole = whole * 10 + digit;
            } else if (frac_digits < 6) {
                frac = frac * 10 + digit;
                ++frac_digits;
            } else if (frac_digits == 6) {
                round_up = digit >= 5;
                ++frac_digits;
            }
        }
        if (!any_digit) throw InputError("malformed decimal: " + std::string(text));
        for (int i = std::min(frac_digits, 6); i < 6; ++i) frac *= 10;
        std::int64_t micros = whole * kScale + frac + (round_up ? 1 : 0);
        return from_micros(neg ? -micros : micros);
    }

    constexpr std::int64_t micros() const { return micros_; }
    double to_double() const { return static_cast<double>(micros_) / static_cast<double>(kScale); }

    constexpr bool is_half_multiple() const { return micros_ % kHalf == 0; }
    /// Only meaningful when `is_half_multiple()`.
    constexpr std::int64_t half_units() const { return micros_ / kHalf; }

    /// Shortest exact rendering with at least `min_decimals` fractional digits.
    std::string to_string(int min_decimals = 0) const {
        const bool neg = micros_ < 0;
        const std::uint64_t mag = neg ? static_cast<std::uint64_t>(-(micros_ + 1)) + 1
                                      : static_cast<std::uint64_t>(micros_);
        std::string out = neg ? "-" : "";
        out += std::to_string(mag / kScale);
        std::string frac = std::to_string(mag % kScale);
        frac.insert(0, 6 - frac.size(), '0');
        while (static_cast<int>(frac.size()) > min_decimals && !frac.empty() && frac.back() == '0')
            frac.pop_back();
        if (!frac.empty()) out += "." + frac;
        return out;
    }

    constexpr Decimal operator-() const { return from_micros(-micros_); }
    constexpr Decimal& operator+=(Decimal o) {
        micros_ += o.micros_;
        return *this;
    }
    constexpr Decimal& operator-=(Decimal o) {
        micros_ -= o.micros_;
        return *this;
    }
    friend constexpr Decimal operator+(Decimal a, Decimal b) { return a += b; }
    friend constexpr Decimal operator-(Decimal a, Decimal b) { return a -= b; }
    friend constexpr auto operator<=>(Decimal, Decimal) = default;
    friend constexpr bool operator==(Decimal, Decimal) = default;

private:
    std::int64_t micros_ = 0;
};

/// 100 * part / whole, computed from the exact integer representations.
inline double percent_of(Decimal part, Decimal whole) {
    if (whole.micros() == 0) throw InputError("percentage of zero maximum");
    return 100.0 * static_cast<double>(part.micros()) / static_cast<double>(whole.micros());
}

}  // namespace exameval
