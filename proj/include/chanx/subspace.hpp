// SPDX-License-Identifier: Apache-2.0
//
// Copyright 2026 The chanx Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
// http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <functional>
#include <iosfwd>
#include <vector>

#include "chanx/types.hpp"

namespace chanx {

/// Uniform grid start + i * step, i = 0..count-1.
struct Grid1D {
    double start = 0.0;
    double step = 1.0;
    int count = 1;

    double at(double i) const { return start + i * step; }
    double stop() const { return at(count - 1); }
    /// Grid covering [lo, hi] with the given step (hi included when it lands on the grid).
    static Grid1D span(double lo, double hi, double step);
};

struct AngleGrid {
    Grid1D theta; ///< radians
    Grid1D phi;   ///< radians
    /// theta in [0, 180] deg, phi in [0, 180] deg, 1 deg steps.
    static AngleGrid standard();
};

struct SubspaceDecomposition {
    CMat signal_basis;
    CMat noise_basis;
    RVec eigenvalues; ///< descending
    bool symmetrized = false; ///< input was not Hermitian to 1e-12 relative
};

struct Spectrum {
    RVec values;
    int flagged = 0; ///< grid points whose denominator hit the floor
};

struct Spectrum2D {
    RMat values; ///< rows: theta, cols: phi
    int flagged = 0;
};

struct Peak {
    int index = 0;
    double position = 0.0; ///< refined fractional grid index
    double height = 0.0;
};

struct Peak2D {
    int row = 0;
    int col = 0;
    double row_position = 0.0;
    double col_position = 0.0;
    double height = 0.0;
};

struct PeakList {
    std::vector<Peak> peaks;
    bool shortfall = false;
};

struct PeakList2D {
    std::vector<Peak2D> peaks;
    bool shortfall = false;
};

enum class PeakRefine {
    parabolic,            ///< 3-point parabola on the values
    reciprocal_parabolic, ///< 3-point parabola on 1/value (smooth for MUSIC spectra)
};

using SteeringFn = std::function<CVec(double)>;

CMat covariance_temporal(const CMat& y, bool forward_backward = false);
CMat covariance_spatial(const CMat& y, bool forward_backward = false);

/// Top-k eigenvectors become the signal basis. Throws when k >= dim.
SubspaceDecomposition eig_subspace(const CMat& r, int k);

/// MDL model order; eigenvalues descending. Returns 0..dim-1.
int mdl_order(const RVec& eigenvalues, int snapshots);

/// 1 / max(g^H (I - Vs Vs^H) g, 1e-12 |g|^2); multiplied by |g|^2 when normalized.
double music_value(const CMat& signal_basis, const CVec& g, bool normalized, bool& flagged);

/// Normalized denominator g^H (I - Vs Vs^H) g / |g|^2, clipped at 0.
double music_denominator(const CMat& signal_basis, const CVec& g);

/**
 * @brief Local minimization by repeated 3-point parabolic steps.
 *
 * The bracket starts at +-h around x0 and shrinks by 4 per iteration.
 */
double refine_minimum(const std::function<double(double)>& f, double x0, double h, int iters = 8);

Spectrum t_music_spectrum(const SubspaceDecomposition& d, const SteeringFn& g, const Grid1D& grid,
                          bool normalized = false);

Spectrum2D s_music_spectrum(const SubspaceDecomposition& d, const AngleGrid& grid, int nx, int ny);

PeakList peak_pick(const RVec& spectrum, int count, int radius,
                   PeakRefine refine = PeakRefine::parabolic);

PeakList2D peak_pick_2d(const RMat& spectrum, int count, int radius,
                        PeakRefine refine = PeakRefine::parabolic);

/// Coordinate-wise local refinement of an S-MUSIC peak.
void refine_angle(const CMat& signal_basis, int nx, int ny, double h_theta, double h_phi, double& theta,
                  double& phi);

/// Y_k: Y with the delay steering columns other than `keep` projected out.
CMat temporal_filter(const CMat& y, const CMat& group_steering, int keep);

/// Y_{k,m}: Y_k with the angle steering columns other than `keep` nulled from the right.
CMat spatial_beamform(const CMat& yk, const CMat& angle_steering, int keep);

struct TstMusicConfig {
    std::vector<int> rows; ///< subcarrier indices of Y's rows (pilot already removed)
    double subcarrier_spacing = 60e3;
    int nx = 4;
    int ny = 4;
    Grid1D delay_grid;
    AngleGrid angle_grid = AngleGrid::standard();
    bool forward_backward = false;
    double group_threshold = 0.1; ///< relative T-MUSIC peak height admitting a group
    int peak_radius = 2;
    int max_paths = 0;            ///< 0: no cap beyond the subspace dimensions
};

struct PathEstimate {
    double delay = 0.0;
    double azimuth = 0.0;
    double elevation = 0.0;
    cd gain;
};

struct GroupEstimate {
    std::vector<double> delays;
    std::vector<std::vector<std::pair<double, double>>> angles;
    std::vector<int> counts;
};

struct TstMusicResult {
    std::vector<PathEstimate> paths;
    GroupEstimate groups;
    int model_order = 0;
    bool flagged = false; ///< a spectrum hit the denominator floor or a peak search fell short
};

/// Five-step joint delay/angle estimation. Throws NoPathsError when MDL returns 0.
TstMusicResult tst_music(const CMat& y, const TstMusicConfig& cfg);

/// Writes "grid,value" rows.
void write_spectrum_csv(std::ostream& os, const Grid1D& grid, const RVec& values);

} // namespace chanx
