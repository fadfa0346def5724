#pragma once

#include <cstdint>
#include <string>

namespace vf {

// Hourly instant in UTC, counted from 1970-01-01T00:00Z.
struct HourStamp {
    std::int64_t hours = 0;

    HourStamp plus(std::int64_t h) const { return HourStamp{hours + h}; }
    friend bool operator==(HourStamp a, HourStamp b) { return a.hours == b.hours; }
    friend auto operator<=>(HourStamp a, HourStamp b) { return a.hours <=> b.hours; }

    // Monday = 0 .. Sunday = 6
    int day_of_week() const;
    int hour_of_day() const;
    // 1..12
    int month() const;
    bool is_weekend() const { return day_of_week() >= 5; }

    // "YYYY-MM-DDTHH:00:00Z"
    std::string iso() const;
    // Accepts "YYYY-MM-DDTHH[:MM[:SS]][Z]" and "YYYY-MM-DD". Minutes/seconds must be zero.
    static HourStamp parse(const std::string& text);
};

}  // namespace vf
