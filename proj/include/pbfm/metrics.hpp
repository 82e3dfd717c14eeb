#pragma once

#include "pbfm/data.hpp"
#include "pbfm/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

// Evaluation metrics: residual statistics, empirical 1-D Wasserstein-1
// distances computed independently per pixel, and per-condition mean/std
// field errors.

namespace pbfm::metrics {

struct ResidualStats {
    double mae = 0;
    double mse = 0;
    double min_sample_mae = 0;  // min/max over per-sample mean |R|
    double max_sample_mae = 0;
};

// r holds `count` equal-length blocks of residual values
inline ResidualStats residual_stats(const std::vector<double>& r, std::int64_t count) {
    if (count <= 0 || r.empty() || r.size() % static_cast<std::size_t>(count) != 0)
        throw std::invalid_argument("residual_stats: empty or ragged batch");
    const std::size_t per = r.size() / static_cast<std::size_t>(count);
    ResidualStats st;
    st.min_sample_mae = std::numeric_limits<double>::infinity();
    st.max_sample_mae = -std::numeric_limits<double>::infinity();
    for (std::int64_t s = 0; s < count; ++s) {
        double sample_abs = 0;
        const double* p = r.data() + static_cast<std::size_t>(s) * per;
        for (std::size_t i = 0; i < per; ++i) {
            sample_abs += std::abs(p[i]);
            st.mse += p[i] * p[i];
        }
        sample_abs /= static_cast<double>(per);
        st.mae += sample_abs;
        st.min_sample_mae = std::min(st.min_sample_mae, sample_abs);
        st.max_sample_mae = std::max(st.max_sample_mae, sample_abs);
    }
    st.mae /= static_cast<double>(count);
    st.mse /= static_cast<double>(r.size());
    return st;
}

namespace detail {

// seeded subsample without replacement (partial Fisher-Yates), preserving
// determinism of unequal-size comparisons
inline std::vector<double> subsample(const std::vector<double>& v, std::size_t m,
                                     std::uint64_t seed) {
    std::vector<std::size_t> idx(v.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng rng(seed);
    std::vector<double> out(m);
    for (std::size_t i = 0; i < m; ++i) {
        const std::size_t j = i + rng.index(idx.size() - i);
        std::swap(idx[i], idx[j]);
        out[i] = v[idx[i]];
    }
    return out;
}

inline std::vector<std::size_t> subsample_indices(std::size_t n, std::size_t m,
                                                  std::uint64_t seed) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    Rng rng(seed);
    for (std::size_t i = 0; i < m; ++i) {
        const std::size_t j = i + rng.index(n - i);
        std::swap(idx[i], idx[j]);
    }
    idx.resize(m);
    return idx;
}

}  // namespace detail

// exact W1 between equal-size empirical measures (mean absolute difference of
// sorted samples); the larger set is subsampled to match, seeded
inline double wasserstein1(std::vector<double> a, std::vector<double> b, std::uint64_t seed = 0) {
    if (a.empty() || b.empty()) throw std::invalid_argument("wasserstein1: empty input");
    if (a.size() > b.size()) a = detail::subsample(a, b.size(), seed);
    if (b.size() > a.size()) b = detail::subsample(b, a.size(), seed);
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
    return s / static_cast<double>(a.size());
}

// W1 at each pixel independently across the sample dimension, averaged over
// pixels, one value per channel
inline std::vector<double> per_pixel_w1(const data::GridDataset& gen, const data::GridDataset& ref,
                                        std::uint64_t seed = 0) {
    if (gen.channels != ref.channels || gen.h != ref.h || gen.w != ref.w)
        throw std::invalid_argument("per_pixel_w1: incompatible datasets");
    const std::int64_t c = gen.channel_count(), hw = gen.h * gen.w;
    const std::size_t m = static_cast<std::size_t>(std::min(gen.count, ref.count));
    if (m == 0) throw std::invalid_argument("per_pixel_w1: empty dataset");
    // one index subset per dataset, shared by every pixel
    auto gi = detail::subsample_indices(static_cast<std::size_t>(gen.count), m, seed);
    auto ri = detail::subsample_indices(static_cast<std::size_t>(ref.count), m, seed + 1);

    std::vector<double> out(c, 0.0);
    std::vector<double> ga(m), rb(m);
    for (std::int64_t ci = 0; ci < c; ++ci) {
        double acc = 0;
        for (std::int64_t px = 0; px < hw; ++px) {
            for (std::size_t s = 0; s < m; ++s) {
                ga[s] = gen.samples[(gi[s] * c + ci) * hw + px];
                rb[s] = ref.samples[(ri[s] * c + ci) * hw + px];
            }
            std::sort(ga.begin(), ga.end());
            std::sort(rb.begin(), rb.end());
            double d = 0;
            for (std::size_t s = 0; s < m; ++s) d += std::abs(ga[s] - rb[s]);
            acc += d / static_cast<double>(m);
        }
        out[ci] = acc / static_cast<double>(hw);
    }
    return out;
}

struct MeanStdError {
    double mean_mse = 0;
    double std_mse = 0;
};

namespace detail {

struct GroupStats {
    std::vector<double> mean;  // [C*H*W]
    std::vector<double> stdev;
};

// per-condition sample mean and (n-1)-normalized std fields
inline std::map<std::string, GroupStats> group_stats(const data::GridDataset& ds) {
    std::map<std::string, std::vector<std::int64_t>> groups;
    for (std::int64_t s = 0; s < ds.count; ++s) {
        std::string key;
        if (ds.cond_dim > 0)
            key.assign(reinterpret_cast<const char*>(ds.condition(s)),
                       static_cast<std::size_t>(ds.cond_dim) * sizeof(double));
        groups[key].push_back(s);
    }
    const std::size_t per = static_cast<std::size_t>(ds.sample_stride());
    std::map<std::string, GroupStats> out;
    for (auto& [key, idx] : groups) {
        if (idx.size() < 2)
            throw std::invalid_argument(
                "cond_mean_std_error: need at least 2 samples per condition, got " +
                std::to_string(idx.size()));
        GroupStats gs;
        gs.mean.assign(per, 0.0);
        gs.stdev.assign(per, 0.0);
        for (auto s : idx) {
            const double* p = ds.sample(s);
            for (std::size_t i = 0; i < per; ++i) gs.mean[i] += p[i];
        }
        for (auto& v : gs.mean) v /= static_cast<double>(idx.size());
        for (auto s : idx) {
            const double* p = ds.sample(s);
            for (std::size_t i = 0; i < per; ++i) {
                const double d = p[i] - gs.mean[i];
                gs.stdev[i] += d * d;
            }
        }
        for (auto& v : gs.stdev) v = std::sqrt(v / static_cast<double>(idx.size() - 1));
        out[key] = std::move(gs);
    }
    return out;
}

}  // namespace detail

// MSE between per-condition mean fields and std fields, averaged over
// conditions. Unconditioned datasets form a single group.
inline MeanStdError cond_mean_std_error(const data::GridDataset& gen, const data::GridDataset& ref) {
    if (gen.channels != ref.channels || gen.h != ref.h || gen.w != ref.w)
        throw std::invalid_argument("cond_mean_std_error: incompatible datasets");
    auto gs = detail::group_stats(gen);
    auto rs = detail::group_stats(ref);
    MeanStdError err;
    std::size_t matched = 0;
    for (const auto& [key, r] : rs) {
        auto it = gs.find(key);
        if (it == gs.end())
            throw std::invalid_argument("cond_mean_std_error: generated set is missing a condition");
        double m = 0, sd = 0;
        for (std::size_t i = 0; i < r.mean.size(); ++i) {
            const double dm = it->second.mean[i] - r.mean[i];
            const double dsd = it->second.stdev[i] - r.stdev[i];
            m += dm * dm;
            sd += dsd * dsd;
        }
        err.mean_mse += m / static_cast<double>(r.mean.size());
        err.std_mse += sd / static_cast<double>(r.mean.size());
        ++matched;
    }
    err.mean_mse /= static_cast<double>(matched);
    err.std_mse /= static_cast<double>(matched);
    return err;
}

struct Histogram {
    std::vector<double> edges;   // nbins + 1
    std::vector<std::int64_t> counts;
};

inline Histogram histogram(const std::vector<double>& values, int nbins) {
    if (values.empty() || nbins < 1) throw std::invalid_argument("histogram: empty input");
    auto [mn_it, mx_it] = std::minmax_element(values.begin(), values.end());
    double lo = *mn_it, hi = *mx_it;
    if (hi <= lo) hi = lo + 1.0;
    Histogram h;
    h.edges.resize(nbins + 1);
    for (int i = 0; i <= nbins; ++i) h.edges[i] = lo + (hi - lo) * i / nbins;
    h.edges[nbins] = hi;  // exact upper edge
    h.counts.assign(nbins, 0);
    for (double v : values) {
        int b = static_cast<int>((v - lo) / (hi - lo) * nbins);
        b = std::clamp(b, 0, nbins - 1);
        ++h.counts[b];
    }
    return h;
}

struct EvalReport {
    ResidualStats residual;
    std::vector<std::string> channels;
    std::vector<double> w1;  // per channel
    double w1_avg = 0;
    MeanStdError cond_error;
    std::int64_t sample_count = 0;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["samples"] = sample_count;
        j["residual"] = {{"mae", residual.mae},
                         {"mse", residual.mse},
                         {"min_sample_mae", residual.min_sample_mae},
                         {"max_sample_mae", residual.max_sample_mae}};
        nlohmann::ordered_json w1j;
        for (std::size_t i = 0; i < channels.size(); ++i) w1j[channels[i]] = w1[i];
        j["wasserstein1"] = w1j;
        j["wasserstein1_avg"] = w1_avg;
        j["mean_mse"] = cond_error.mean_mse;
        j["std_mse"] = cond_error.std_mse;
        return j;
    }
};

}  // namespace pbfm::metrics
