// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "rank1lab/align.hpp"
#include "rank1lab/spectral.hpp"

namespace rank1lab::report {

// CSV: one row per layer, spectra flattened up to a cap. JSON carries the
// full spectra.
void write_spectrum_csv(const spectral::SpectrumReport& rep, const std::string& path,
                        int cap = 64);
void write_spectrum_json(const spectral::SpectrumReport& rep, const std::string& path);

void write_sigma_table_csv(const std::vector<spectral::SigmaRatioRow>& rows,
                           const std::string& path);

// panel order: sigma1, frob_cos, theta_left, theta_right
void write_alignment_csv(const std::vector<align::AlignmentRow>& rows,
                         const std::string& path);
void write_alignment_json(const std::vector<align::AlignmentRow>& rows,
                          const std::string& path);

// minimal self-contained polyline plot of one layer's spectrum
void write_spectrum_svg(const spectral::SpectrumRow& row, const std::string& path);

} // namespace rank1lab::report
