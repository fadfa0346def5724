#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vf/data.hpp"

namespace vf {

enum class Zone : std::uint8_t { Inactive = 0, Residential = 1, Commercial = 2 };

// Desk-scale synthetic city. The deterministic part of every cell is
// 168-hour periodic apart from the seasonal term; `noise_level` scales every
// stochastic component (white noise, zone drift, local events, sensor noise).
struct SynthConfig {
    int height = 16;
    int width = 16;
    int days = 90;
    std::string start_time = "2017-01-01T00:00:00Z";

    double inactive_fraction = 0.1;
    int commercial_centers = 3;
    double commercial_radius = 3.0;

    double base_level = 500.0;
    double base_spread = 0.5;  // lognormal sigma of per-cell base level
    double daily_amplitude = 0.45;
    double weekly_amplitude = 0.15;
    double weekend_effect = 0.5;
    double seasonal_amplitude = 0.08;
    double seasonal_period_days = 120.0;

    double noise_level = 1.0;
    double white_noise = 0.02;
    double drift_std = 0.02;   // AR(1) innovation per hour
    double drift_rho = 0.98;
    double event_rate_per_day = 1.0;
    double event_amplitude = 0.35;
    double event_radius = 1.5;

    int sensors = 12;
    int sensor_lag = 3;
    double sensor_radius = 1.5;
    double traffic_noise = 0.02;
    double traffic_scale = 1.0;

    void validate() const;
};

struct SynthMetadata {
    std::vector<Zone> zones;                    // [H*W]
    std::vector<std::array<double, 2>> sensor_coords;  // (x = column, y = row) in cell units
    std::vector<std::vector<std::pair<std::size_t, double>>> sensor_sources;  // (cell, weight), weights sum to 1
    std::vector<double> sensor_gain;
    int lag = 0;
    int true_latent_rank = 0;  // numerical rank of the centered deterministic grid over active cells
};

struct SynthCity {
    GridSeries grid;
    TrafficSeries traffic;
    SynthMetadata meta;
};

SynthCity synth_city(const SynthConfig& cfg, std::uint64_t seed);

// Lagged source signal a sensor reads: sum_c w_c * grid[t - lag, c], defined for t >= lag.
double sensor_source_value(const SynthCity& city, std::size_t sensor, std::size_t t);

}  // namespace vf
