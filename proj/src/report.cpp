// SPDX-License-Identifier: Apache-2.0
#include "rank1lab/report.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>

#include <json.hpp>

namespace rank1lab::report {

namespace {

std::string fmt(double v) {
    if (v == 0.0) v = 0.0; // normalize -0
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::ofstream open_out(const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path);
    return out;
}

} // namespace

void write_spectrum_csv(const spectral::SpectrumReport& rep, const std::string& path, int cap) {
    auto out = open_out(path);
    int max_k = 0;
    for (const auto& r : rep.rows)
        max_k = std::max(max_k, static_cast<int>(r.svals.size()));
    max_k = std::min(max_k, cap);
    out << "layer,n_svals,eff_rank,eff_rank_count,tail_slope,tail_r2,degenerate";
    for (int i = 1; i <= max_k; ++i) out << ",s" << i;
    out << "\n";
    for (const auto& r : rep.rows) {
        out << r.name << ',' << r.svals.size() << ',' << fmt(r.eff_rank) << ','
            << r.eff_rank_count << ',' << fmt(r.tail_slope) << ',' << fmt(r.tail_r2) << ','
            << (r.degenerate ? 1 : 0);
        for (int i = 0; i < max_k; ++i)
            out << ',' << (i < static_cast<int>(r.svals.size()) ? fmt(r.svals[i]) : "");
        out << "\n";
    }
}

void write_spectrum_json(const spectral::SpectrumReport& rep, const std::string& path) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : rep.rows) {
        rows.push_back({{"layer", r.name},
                        {"svals", r.svals},
                        {"ratios", r.ratios},
                        {"eff_rank", r.eff_rank},
                        {"eff_rank_count", r.eff_rank_count},
                        {"tail_slope", r.tail_slope},
                        {"tail_r2", r.tail_r2},
                        {"degenerate", r.degenerate}});
    }
    auto out = open_out(path);
    out << nlohmann::json{{"rows", rows}}.dump(2) << "\n";
}

void write_sigma_table_csv(const std::vector<spectral::SigmaRatioRow>& rows,
                           const std::string& path) {
    auto out = open_out(path);
    size_t max_k = 0;
    for (const auto& r : rows) max_k = std::max(max_k, r.percents.size());
    out << "layer";
    for (size_t i = 1; i <= max_k; ++i) out << ",sigma" << i;
    out << "\n";
    for (const auto& r : rows) {
        out << r.name;
        char buf[32];
        for (size_t i = 0; i < max_k; ++i) {
            if (i < r.percents.size()) {
                std::snprintf(buf, sizeof(buf), "%.2f%%", r.percents[i]);
                out << ',' << buf;
            } else {
                out << ',';
            }
        }
        out << "\n";
    }
}

void write_alignment_csv(const std::vector<align::AlignmentRow>& rows,
                         const std::string& path) {
    auto out = open_out(path);
    out << "layer,sigma1,frob_cos,theta_left,theta_right,hadamard_ratio,"
           "hadamard_ratio_rescaled,extension,degenerate\n";
    for (const auto& r : rows) {
        out << r.layer << ',' << fmt(r.sigma1) << ',' << fmt(r.frob_cos) << ','
            << fmt(r.theta_left) << ',' << fmt(r.theta_right) << ',' << fmt(r.hadamard_ratio)
            << ',' << fmt(r.hadamard_ratio_rescaled) << ',' << (r.extension ? 1 : 0) << ','
            << (r.degenerate ? 1 : 0) << "\n";
    }
}

void write_alignment_json(const std::vector<align::AlignmentRow>& rows,
                          const std::string& path) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& r : rows) {
        arr.push_back({{"layer", r.layer},
                       {"sigma1", r.sigma1},
                       {"frob_cos", r.frob_cos},
                       {"theta_left", r.theta_left},
                       {"theta_right", r.theta_right},
                       {"hadamard_ratio", r.hadamard_ratio},
                       {"hadamard_ratio_rescaled", r.hadamard_ratio_rescaled},
                       {"extension", r.extension},
                       {"degenerate", r.degenerate}});
    }
    auto out = open_out(path);
    out << nlohmann::json{{"rows", arr}}.dump(2) << "\n";
}

void write_spectrum_svg(const spectral::SpectrumRow& row, const std::string& path) {
    const int width = 640, height = 400, margin = 48;
    const int k = static_cast<int>(row.svals.size());
    double smax = 0.0;
    for (double s : row.svals) smax = std::max(smax, s);
    if (smax <= 0.0) smax = 1.0;

    auto out = open_out(path);
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
        << height << "\" viewBox=\"0 0 " << width << ' ' << height << "\">\n";
    out << "  <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out << "  <text x=\"" << margin << "\" y=\"24\" font-family=\"monospace\" font-size=\"14\">"
        << row.name << " (k=" << k << ")</text>\n";
    // axes
    out << "  <line x1=\"" << margin << "\" y1=\"" << height - margin << "\" x2=\""
        << width - margin / 2 << "\" y2=\"" << height - margin
        << "\" stroke=\"black\" stroke-width=\"1\"/>\n";
    out << "  <line x1=\"" << margin << "\" y1=\"" << margin << "\" x2=\"" << margin
        << "\" y2=\"" << height - margin << "\" stroke=\"black\" stroke-width=\"1\"/>\n";
    if (k > 0) {
        out << "  <polyline fill=\"none\" stroke=\"crimson\" stroke-width=\"1.5\" points=\"";
        for (int i = 0; i < k; ++i) {
            const double x =
                margin + (width - 1.5 * margin) * (k == 1 ? 0.0 : static_cast<double>(i) / (k - 1));
            const double y = height - margin - (height - 2.0 * margin) * (row.svals[i] / smax);
            out << x << ',' << y << ' ';
        }
        out << "\"/>\n";
        // mark the two leading values
        for (int i = 0; i < std::min(2, k); ++i) {
            const double x =
                margin + (width - 1.5 * margin) * (k == 1 ? 0.0 : static_cast<double>(i) / (k - 1));
            const double y = height - margin - (height - 2.0 * margin) * (row.svals[i] / smax);
            out << "  <circle cx=\"" << x << "\" cy=\"" << y << "\" r=\"4\" fill=\""
                << (i == 0 ? "crimson" : "orange") << "\"/>\n";
        }
    }
    out << "</svg>\n";
}

} // namespace rank1lab::report
