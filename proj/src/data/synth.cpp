#include "vf/synth.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

#include <Eigen/Dense>

#include "vf/core/nn.hpp"

namespace vf {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

struct Event {
    std::int64_t start;
    int duration;
    double row, col, amplitude;
};

double daily_profile(Zone z, int hour, bool weekend, double weekend_effect) {
    const double h = static_cast<double>(hour);
    if (z == Zone::Commercial) {
        const double v = std::cos(kTwoPi * (h - 13.0) / 24.0) + 0.35 * std::cos(2.0 * kTwoPi * (h - 13.0) / 24.0);
        return weekend ? v * (1.0 - weekend_effect) : v;
    }
    const double v = std::cos(kTwoPi * (h - 20.0) / 24.0) + 0.25 * std::cos(2.0 * kTwoPi * (h - 8.0) / 24.0);
    return weekend ? v * (1.0 + 0.5 * weekend_effect) : v;
}

double weekly_profile(Zone z, int hour_of_week) {
    const double phase = z == Zone::Commercial ? 0.0 : std::numbers::pi / 2.0;
    return std::cos(kTwoPi * hour_of_week / 168.0 - phase);
}

}  // namespace

void SynthConfig::validate() const {
    if (height < 4 || width < 4) throw std::invalid_argument("synth: grid must be at least 4x4");
    if (days < 14) throw std::invalid_argument("synth: at least 14 days are required");
    if (inactive_fraction < 0.0 || inactive_fraction >= 1.0) throw std::invalid_argument("synth: inactive_fraction must be in [0,1)");
    if (sensors < 1) throw std::invalid_argument("synth: need at least one sensor");
    if (sensor_lag < 0) throw std::invalid_argument("synth: sensor_lag must be >= 0");
    if (noise_level < 0.0) throw std::invalid_argument("synth: noise_level must be >= 0");
}

SynthCity synth_city(const SynthConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    nn::Rng rng(seed);
    const std::size_t H = static_cast<std::size_t>(cfg.height), W = static_cast<std::size_t>(cfg.width);
    const std::size_t cells = H * W;
    const std::size_t steps = static_cast<std::size_t>(cfg.days) * 24;
    const std::size_t lag = static_cast<std::size_t>(cfg.sensor_lag);
    const std::size_t total = steps + lag;  // internal timeline starts `lag` hours early
    const HourStamp start = HourStamp::parse(cfg.start_time);
    const HourStamp internal_start = start.plus(-static_cast<std::int64_t>(lag));

    SynthCity city;
    SynthMetadata& meta = city.meta;
    meta.lag = cfg.sensor_lag;

    // Zones
    meta.zones.assign(cells, Zone::Residential);
    std::vector<std::array<double, 2>> centers;
    for (int k = 0; k < cfg.commercial_centers; ++k)
        centers.push_back({rng.uniform(1.0, static_cast<double>(H) - 2.0), rng.uniform(1.0, static_cast<double>(W) - 2.0)});
    for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j)
            for (const auto& c : centers)
                if (std::hypot(static_cast<double>(i) - c[0], static_cast<double>(j) - c[1]) <= cfg.commercial_radius)
                    meta.zones[i * W + j] = Zone::Commercial;
    std::vector<std::size_t> order(cells);
    for (std::size_t k = 0; k < cells; ++k) order[k] = k;
    rng.shuffle(order.begin(), order.end());
    const auto n_inactive = static_cast<std::size_t>(std::llround(cfg.inactive_fraction * static_cast<double>(cells)));
    for (std::size_t k = 0; k < n_inactive; ++k) meta.zones[order[k]] = Zone::Inactive;

    // Per-cell levels and amplitudes
    std::vector<double> base(cells), amp_daily(cells), amp_weekly(cells), amp_season(cells);
    for (std::size_t c = 0; c < cells; ++c) {
        base[c] = cfg.base_level * std::exp(cfg.base_spread * rng.normal());
        amp_daily[c] = cfg.daily_amplitude * rng.uniform(0.7, 1.3);
        amp_weekly[c] = cfg.weekly_amplitude * rng.uniform(0.7, 1.3);
        amp_season[c] = cfg.seasonal_amplitude * rng.uniform(0.5, 1.5);
    }

    // Deterministic component, relative to base: det[u * cells + c]
    std::vector<double> det(total * cells, 0.0);
    for (std::size_t u = 0; u < total; ++u) {
        const HourStamp ts = internal_start.plus(static_cast<std::int64_t>(u));
        const int hour = ts.hour_of_day();
        const int dow = ts.day_of_week();
        const bool weekend = dow >= 5;
        const double season =
            std::sin(kTwoPi * static_cast<double>(ts.hours - start.hours) / (cfg.seasonal_period_days * 24.0));
        double dp[3], wp[3];
        for (Zone z : {Zone::Residential, Zone::Commercial}) {
            dp[static_cast<int>(z)] = daily_profile(z, hour, weekend, cfg.weekend_effect);
            wp[static_cast<int>(z)] = weekly_profile(z, dow * 24 + hour);
        }
        for (std::size_t c = 0; c < cells; ++c) {
            const Zone z = meta.zones[c];
            if (z == Zone::Inactive) continue;
            det[u * cells + c] = amp_daily[c] * dp[static_cast<int>(z)] + amp_weekly[c] * wp[static_cast<int>(z)] +
                                 amp_season[c] * season;
        }
    }

    // Stochastic components; every draw happens regardless of noise_level so
    // the random stream does not depend on it.
    std::vector<double> stoch(total * cells, 0.0);
    {
        double drift[3] = {0.0, 0.0, 0.0};
        std::vector<Event> events;
        for (std::size_t u = 0; u < total; ++u) {
            for (int z = 1; z <= 2; ++z) drift[z] = cfg.drift_rho * drift[z] + cfg.drift_std * rng.normal();
            if (rng.uniform() < cfg.event_rate_per_day / 24.0) {
                Event e;
                e.start = static_cast<std::int64_t>(u);
                e.duration = 3 + static_cast<int>(rng.next() % 6);
                e.row = rng.uniform(0.0, static_cast<double>(H) - 1.0);
                e.col = rng.uniform(0.0, static_cast<double>(W) - 1.0);
                e.amplitude = cfg.event_amplitude * rng.uniform(0.5, 1.5);
                events.push_back(e);
            }
            for (std::size_t c = 0; c < cells; ++c) {
                const double white = rng.normal();
                const Zone z = meta.zones[c];
                if (z == Zone::Inactive) continue;
                double ev = 0.0;
                for (const Event& e : events) {
                    const auto k = static_cast<std::int64_t>(u) - e.start;
                    if (k < 0 || k >= e.duration) continue;
                    const double ramp = std::sin(std::numbers::pi * (static_cast<double>(k) + 0.5) / e.duration);
                    const double d2 = std::pow(static_cast<double>(c / W) - e.row, 2) + std::pow(static_cast<double>(c % W) - e.col, 2);
                    ev += e.amplitude * ramp * std::exp(-d2 / (2.0 * cfg.event_radius * cfg.event_radius));
                }
                stoch[u * cells + c] = drift[static_cast<int>(z)] + ev + cfg.white_noise * white;
            }
            std::erase_if(events, [u](const Event& e) { return static_cast<std::int64_t>(u) - e.start >= e.duration; });
        }
    }

    std::vector<double> full(total * cells, 0.0);
    for (std::size_t u = 0; u < total; ++u)
        for (std::size_t c = 0; c < cells; ++c) {
            if (meta.zones[c] == Zone::Inactive) continue;
            const std::size_t i = u * cells + c;
            full[i] = base[c] * std::max(0.0, 1.0 + det[i] + cfg.noise_level * stoch[i]);
        }

    city.grid.values = NdArray({steps, H, W, 1});
    std::copy(full.begin() + static_cast<std::ptrdiff_t>(lag * cells), full.end(), city.grid.values.data.begin());
    city.grid.timestamps = hourly_timeline(start, steps);
    city.grid.normalized = false;

    // Sensors
    const std::size_t ns = static_cast<std::size_t>(cfg.sensors);
    meta.sensor_coords.resize(ns);
    meta.sensor_sources.resize(ns);
    meta.sensor_gain.resize(ns);
    for (std::size_t s = 0; s < ns; ++s) {
        const double x = rng.uniform(1.0, static_cast<double>(W) - 2.0);
        const double y = rng.uniform(1.0, static_cast<double>(H) - 2.0);
        meta.sensor_coords[s] = {x, y};
        meta.sensor_gain[s] = cfg.traffic_scale * rng.uniform(0.5, 1.5);
        double wsum = 0.0;
        for (std::size_t c = 0; c < cells; ++c) {
            const double d = std::hypot(static_cast<double>(c % W) - x, static_cast<double>(c / W) - y);
            if (d > 3.0 * cfg.sensor_radius) continue;
            const double w = std::exp(-d * d / (2.0 * cfg.sensor_radius * cfg.sensor_radius));
            meta.sensor_sources[s].emplace_back(c, w);
            wsum += w;
        }
        for (auto& [c, w] : meta.sensor_sources[s]) w /= wsum;
    }
    city.traffic.values = NdArray({steps, ns, 1});
    city.traffic.timestamps = city.grid.timestamps;
    for (std::size_t s = 0; s < ns; ++s) city.traffic.sensor_ids.push_back("S" + std::to_string(s));
    for (std::size_t t = 0; t < steps; ++t)
        for (std::size_t s = 0; s < ns; ++s) {
            const std::size_t u = t;  // internal index of t - lag
            double src = 0.0;
            for (const auto& [c, w] : meta.sensor_sources[s]) src += w * full[u * cells + c];
            const double noise = rng.normal();
            city.traffic.values.at({t, s, 0}) =
                std::max(0.0, meta.sensor_gain[s] * src * (1.0 + cfg.noise_level * cfg.traffic_noise * noise));
        }

    // Numerical rank of the centered deterministic signal over active cells.
    {
        std::vector<std::size_t> active;
        for (std::size_t c = 0; c < cells; ++c)
            if (meta.zones[c] != Zone::Inactive) active.push_back(c);
        Eigen::MatrixXd D(static_cast<Eigen::Index>(steps), static_cast<Eigen::Index>(active.size()));
        for (std::size_t t = 0; t < steps; ++t)
            for (std::size_t k = 0; k < active.size(); ++k)
                D(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(k)) =
                    base[active[k]] * det[(t + lag) * cells + active[k]];
        D.rowwise() -= D.colwise().mean();
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(D.transpose() * D);
        const Eigen::VectorXd ev = es.eigenvalues();
        const double top = ev.maxCoeff();
        int rank = 0;
        for (Eigen::Index i = 0; i < ev.size(); ++i)
            if (top > 0 && ev(i) > 1e-10 * top) ++rank;
        meta.true_latent_rank = rank;
    }
    return city;
}

double sensor_source_value(const SynthCity& city, std::size_t sensor, std::size_t t) {
    const std::size_t lag = static_cast<std::size_t>(city.meta.lag);
    if (t < lag) throw std::out_of_range("sensor_source_value: t < lag");
    const std::size_t cells = city.grid.frame_size();
    double src = 0.0;
    for (const auto& [c, w] : city.meta.sensor_sources.at(sensor)) src += w * city.grid.values.data[(t - lag) * cells + c];
    return src;
}

}  // namespace vf
