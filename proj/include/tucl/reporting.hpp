#pragma once

#include <filesystem>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "tucl/container.hpp"
#include "tucl/metrics.hpp"

namespace tucl {

inline constexpr const char* kVersion = "0.1.0";

/// Stable hash of a resolved configuration, stamped into every CSV so a
/// run can be traced back to the exact settings that produced it.
inline std::string config_hash(const json& cfg) {
    const std::string s = cfg.dump();
    uint64_t h = 1469598103934665603ull;
    for (char c : s) {
        h ^= static_cast<uint8_t>(c);
        h *= 1099511628211ull;
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

inline std::string csv_comment(const std::string& cfg_hash) {
    return std::string("# tucl ") + kVersion + " config=" + cfg_hash + "\n";
}

inline std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(12) << v;
    return os.str();
}

inline void write_report_csv(const EvalReport& rep, const std::filesystem::path& path,
                             const std::string& cfg_hash) {
    std::ostringstream os;
    os << csv_comment(cfg_hash);
    os << "# hd95: linear-interpolated 95th percentile over 6-connected surface distances, "
          "symmetric max; empty-vs-nonempty mask scores the volume diagonal\n";
    os << "case,region,dice_pct,hd95_mm,pred_volume_mm3,true_volume_mm3\n";
    for (size_t i = 0; i < rep.cases.size(); ++i)
        for (int c = 0; c < 3; ++c) {
            const auto& m = rep.cases[i][static_cast<size_t>(c)];
            os << rep.case_ids[i] << ',' << kRegionNames[static_cast<size_t>(c)] << ','
               << fmt(m.dice) << ',' << fmt(m.hd95_mm) << ',' << fmt(m.pred_volume) << ','
               << fmt(m.true_volume) << "\n";
        }
    os << "aggregate,region,mean_dice_pct,mean_hd95_mm,ba_bias,ba_lower,ba_upper,pearson_r\n";
    for (int c = 0; c < 3; ++c) {
        const auto ci = static_cast<size_t>(c);
        os << "aggregate," << kRegionNames[ci] << ',' << fmt(rep.mean_dice[ci]) << ','
           << fmt(rep.mean_hd95[ci]) << ',';
        if (rep.agreement[ci])
            os << fmt(rep.agreement[ci]->bias) << ',' << fmt(rep.agreement[ci]->lower) << ','
               << fmt(rep.agreement[ci]->upper) << ',';
        else
            os << ",,,";
        if (rep.pearson[ci]) os << fmt(*rep.pearson[ci]);
        os << "\n";
    }
    os << "aggregate,Ave," << fmt(rep.ave_dice) << ',' << fmt(rep.ave_hd95) << ",,,,\n";
    atomic_write(path, os.str());
}

/// Plot data: (mean, difference) pairs for Bland-Altman and
/// (true, pred) pairs for correlation, one row per (case, region).
inline void write_agreement_csv(const EvalReport& rep, const std::filesystem::path& path,
                                const std::string& cfg_hash) {
    std::ostringstream os;
    os << csv_comment(cfg_hash);
    os << "case,region,mean_volume_mm3,diff_volume_mm3,true_volume_mm3,pred_volume_mm3\n";
    for (size_t i = 0; i < rep.cases.size(); ++i)
        for (int c = 0; c < 3; ++c) {
            const auto& m = rep.cases[i][static_cast<size_t>(c)];
            os << rep.case_ids[i] << ',' << kRegionNames[static_cast<size_t>(c)] << ','
               << fmt((m.pred_volume + m.true_volume) / 2.0) << ','
               << fmt(m.pred_volume - m.true_volume) << ',' << fmt(m.true_volume) << ','
               << fmt(m.pred_volume) << "\n";
        }
    atomic_write(path, os.str());
}

/// Ablation table mirroring the Dice/HD95 x (ET, WT, TC, Ave) layout.
inline void write_ablation_csv(const std::vector<std::pair<std::string, EvalReport>>& rows,
                               const std::filesystem::path& path, const std::string& cfg_hash) {
    std::ostringstream os;
    os << csv_comment(cfg_hash);
    os << "config,dice_ET,dice_WT,dice_TC,dice_Ave,hd95_ET,hd95_WT,hd95_TC,hd95_Ave\n";
    for (const auto& [name, rep] : rows) {
        os << name << ',' << fmt(rep.mean_dice[2]) << ',' << fmt(rep.mean_dice[0]) << ','
           << fmt(rep.mean_dice[1]) << ',' << fmt(rep.ave_dice) << ',' << fmt(rep.mean_hd95[2])
           << ',' << fmt(rep.mean_hd95[0]) << ',' << fmt(rep.mean_hd95[1]) << ','
           << fmt(rep.ave_hd95) << "\n";
    }
    atomic_write(path, os.str());
}

} // namespace tucl
