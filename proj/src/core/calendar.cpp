#include "vf/core/calendar.hpp"

#include <chrono>
#include <cstdio>
#include <stdexcept>

namespace vf {

namespace {

std::int64_t floor_div(std::int64_t a, std::int64_t b) {
    std::int64_t q = a / b;
    if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
    return q;
}

std::chrono::sys_days day_of(HourStamp t) {
    return std::chrono::sys_days{std::chrono::days{floor_div(t.hours, 24)}};
}

}  // namespace

int HourStamp::day_of_week() const {
    return static_cast<int>(std::chrono::weekday{day_of(*this)}.iso_encoding()) - 1;
}

int HourStamp::hour_of_day() const {
    return static_cast<int>(hours - floor_div(hours, 24) * 24);
}

int HourStamp::month() const {
    std::chrono::year_month_day ymd{day_of(*this)};
    return static_cast<int>(static_cast<unsigned>(ymd.month()));
}

std::string HourStamp::iso() const {
    std::chrono::year_month_day ymd{day_of(*this)};
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%04d-%02u-%02uT%02d:00:00Z", static_cast<int>(ymd.year()),
                  static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()), hour_of_day());
    return buf;
}

HourStamp HourStamp::parse(const std::string& text) {
    int y = 0, mo = 0, d = 0, h = 0, mi = 0, s = 0;
    int n = std::sscanf(text.c_str(), "%d-%d-%dT%d:%d:%d", &y, &mo, &d, &h, &mi, &s);
    if (n < 3) throw std::invalid_argument("bad ISO-8601 timestamp: " + text);
    if (mi != 0 || s != 0) throw std::invalid_argument("timestamp not on the hour: " + text);
    std::chrono::year_month_day ymd{std::chrono::year{y}, std::chrono::month{static_cast<unsigned>(mo)},
                                    std::chrono::day{static_cast<unsigned>(d)}};
    if (!ymd.ok() || h < 0 || h > 23) throw std::invalid_argument("invalid calendar date: " + text);
    std::chrono::sys_days days{ymd};
    return HourStamp{static_cast<std::int64_t>(days.time_since_epoch().count()) * 24 + h};
}

}  // namespace vf
