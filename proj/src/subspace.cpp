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

#include "chanx/subspace.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>

#include <Eigen/Eigenvalues>

#include "chanx/linalg.hpp"
#include "chanx/scenario.hpp"

namespace chanx {

namespace {

constexpr double kDenominatorFloor = 1e-12;

double parabolic_offset(double left, double mid, double right)
{
    const double den = left - 2.0 * mid + right;
    if (!(std::abs(den) > 0.0) || !std::isfinite(den))
        return 0.0;
    return std::clamp(0.5 * (left - right) / den, -0.5, 0.5);
}

double refine_offset(double left, double mid, double right, PeakRefine refine)
{
    if (refine == PeakRefine::reciprocal_parabolic) {
        // The reciprocal has a minimum where the spectrum peaks; the offset formula is sign-agnostic.
        return parabolic_offset(1.0 / left, 1.0 / mid, 1.0 / right);
    }
    return parabolic_offset(left, mid, right);
}

} // namespace

double refine_minimum(const std::function<double(double)>& f, double x0, double h, int iters)
{
    // A bracket that does not contain the minimum slides at constant width; only bracketed steps shrink it.
    constexpr int kMaxSlides = 64;
    double x = x0;
    int slides = 0;
    for (int it = 0; it < iters && h > 0.0;) {
        const double l = f(x - h), m = f(x), r = f(x + h);
        if (l < m && l <= r && slides < kMaxSlides) {
            x -= h;
            ++slides;
        } else if (r < m && slides < kMaxSlides) {
            x += h;
            ++slides;
        } else {
            if (!(l < m) && !(r < m))
                x += h * parabolic_offset(l, m, r);
            h *= 0.25;
            ++it;
        }
    }
    return x;
}

double music_denominator(const CMat& signal_basis, const CVec& g)
{
    const double gg = g.squaredNorm();
    if (!(gg > 0.0))
        return 0.0;
    const double proj = signal_basis.cols() > 0 ? (signal_basis.adjoint() * g).squaredNorm() : 0.0;
    return std::max(gg - proj, 0.0) / gg;
}

Grid1D Grid1D::span(double lo, double hi, double step)
{
    if (!(step > 0.0) || hi < lo)
        throw std::invalid_argument("Grid1D::span: need step > 0 and hi >= lo");
    Grid1D g;
    g.start = lo;
    g.step = step;
    g.count = static_cast<int>(std::floor((hi - lo) / step + 1e-9)) + 1;
    return g;
}

AngleGrid AngleGrid::standard()
{
    AngleGrid a;
    a.theta = Grid1D::span(0.0, kPi, deg2rad(1.0));
    a.phi = Grid1D::span(0.0, kPi, deg2rad(1.0));
    return a;
}

CMat covariance_temporal(const CMat& y, bool forward_backward)
{
    const double n = static_cast<double>(std::max<Eigen::Index>(1, y.cols()));
    CMat r = y * y.adjoint() / n;
    if (forward_backward) {
        const CMat rev = r.reverse();
        r = 0.5 * (r + rev.conjugate());
    }
    return r;
}

CMat covariance_spatial(const CMat& y, bool forward_backward)
{
    const double p = static_cast<double>(std::max<Eigen::Index>(1, y.rows()));
    CMat r = y.transpose() * y.conjugate() / p;
    if (forward_backward) {
        const CMat rev = r.reverse();
        r = 0.5 * (r + rev.conjugate());
    }
    return r;
}

SubspaceDecomposition eig_subspace(const CMat& r, int k)
{
    const Eigen::Index dim = r.rows();
    if (r.cols() != dim)
        throw std::invalid_argument("eig_subspace: matrix must be square");
    if (k < 0 || k >= dim)
        throw std::invalid_argument("eig_subspace: signal dimension must be below the matrix size");
    SubspaceDecomposition out;
    const double scale = std::max(r.norm(), std::numeric_limits<double>::min());
    out.symmetrized = (r - r.adjoint()).norm() > 1e-12 * scale;
    const CMat h = 0.5 * (r + r.adjoint());
    Eigen::SelfAdjointEigenSolver<CMat> es(h);
    if (es.info() != Eigen::Success)
        throw std::runtime_error("eig_subspace: eigensolver failed");
    out.eigenvalues = es.eigenvalues().reverse().cwiseMax(0.0);
    const CMat v = es.eigenvectors().rowwise().reverse();
    out.signal_basis = v.leftCols(k);
    out.noise_basis = v.rightCols(dim - k);
    return out;
}

int mdl_order(const RVec& eigenvalues, int snapshots)
{
    const Eigen::Index p = eigenvalues.size();
    if (p == 0)
        return 0;
    if (snapshots < 1)
        throw std::invalid_argument("mdl_order: snapshots must be >= 1");
    const double lmax = eigenvalues.maxCoeff();
    if (!(lmax > 0.0))
        return 0;
    const RVec lam = eigenvalues.cwiseMax(lmax * 1e-10);
    const double n = static_cast<double>(snapshots);
    int best = 0;
    double best_score = std::numeric_limits<double>::infinity();
    for (Eigen::Index k = 0; k < p; ++k) {
        const Eigen::Index m = p - k;
        const auto tail = lam.tail(m);
        const double log_geo = tail.array().log().mean();
        const double log_ari = std::log(tail.mean());
        const double kk = static_cast<double>(k);
        const double score = -n * static_cast<double>(m) * (log_geo - log_ari) +
                             0.5 * kk * (2.0 * static_cast<double>(p) - kk) * std::log(n);
        if (score < best_score) {
            best_score = score;
            best = static_cast<int>(k);
        }
    }
    return best;
}

double music_value(const CMat& signal_basis, const CVec& g, bool normalized, bool& flagged)
{
    const double gg = g.squaredNorm();
    const double proj = signal_basis.cols() > 0 ? (signal_basis.adjoint() * g).squaredNorm() : 0.0;
    double den = gg - proj;
    const double floor = kDenominatorFloor * gg;
    flagged = false;
    if (!(den > floor)) {
        den = floor > 0.0 ? floor : std::numeric_limits<double>::min();
        flagged = true;
    }
    return normalized ? gg / den : 1.0 / den;
}

Spectrum t_music_spectrum(const SubspaceDecomposition& d, const SteeringFn& g, const Grid1D& grid,
                          bool normalized)
{
    if (grid.count < 1)
        throw std::invalid_argument("t_music_spectrum: empty grid");
    Spectrum s;
    s.values.resize(grid.count);
    for (int i = 0; i < grid.count; ++i) {
        bool f = false;
        s.values(i) = music_value(d.signal_basis, g(grid.at(i)), normalized, f);
        s.flagged += f ? 1 : 0;
    }
    return s;
}

Spectrum2D s_music_spectrum(const SubspaceDecomposition& d, const AngleGrid& grid, int nx, int ny)
{
    if (grid.theta.count < 1 || grid.phi.count < 1)
        throw std::invalid_argument("s_music_spectrum: empty grid");
    Spectrum2D s;
    s.values.resize(grid.theta.count, grid.phi.count);
    for (int i = 0; i < grid.theta.count; ++i)
        for (int j = 0; j < grid.phi.count; ++j) {
            bool f = false;
            const CVec a = steering_vector_upa(grid.theta.at(i), grid.phi.at(j), nx, ny);
            s.values(i, j) = music_value(d.signal_basis, a, false, f);
            s.flagged += f ? 1 : 0;
        }
    return s;
}

PeakList peak_pick(const RVec& spectrum, int count, int radius, PeakRefine refine)
{
    if (count < 1)
        throw std::invalid_argument("peak_pick: count must be >= 1");
    const int n = static_cast<int>(spectrum.size());
    radius = std::max(1, radius);
    std::vector<Peak> cand;
    for (int i = 0; i < n; ++i) {
        bool is_max = true;
        bool above_some = false;
        for (int j = std::max(0, i - radius); j <= std::min(n - 1, i + radius) && is_max; ++j) {
            if (j == i)
                continue;
            if (spectrum(j) > spectrum(i))
                is_max = false;
            else if (spectrum(j) < spectrum(i))
                above_some = true;
        }
        if (is_max && above_some)
            cand.push_back({i, static_cast<double>(i), spectrum(i)});
    }
    std::stable_sort(cand.begin(), cand.end(),
                     [](const Peak& a, const Peak& b) { return a.height > b.height; });
    PeakList out;
    for (const Peak& c : cand) {
        if (static_cast<int>(out.peaks.size()) >= count)
            break;
        bool suppressed = false;
        for (const Peak& p : out.peaks)
            if (std::abs(p.index - c.index) <= radius)
                suppressed = true;
        if (suppressed)
            continue;
        Peak p = c;
        if (c.index > 0 && c.index < n - 1)
            p.position = c.index + refine_offset(spectrum(c.index - 1), spectrum(c.index),
                                                 spectrum(c.index + 1), refine);
        out.peaks.push_back(p);
    }
    out.shortfall = static_cast<int>(out.peaks.size()) < count;
    return out;
}

PeakList2D peak_pick_2d(const RMat& spectrum, int count, int radius, PeakRefine refine)
{
    if (count < 1)
        throw std::invalid_argument("peak_pick_2d: count must be >= 1");
    const int nr = static_cast<int>(spectrum.rows());
    const int nc = static_cast<int>(spectrum.cols());
    radius = std::max(1, radius);
    std::vector<Peak2D> cand;
    for (int i = 0; i < nr; ++i)
        for (int j = 0; j < nc; ++j) {
            const double v = spectrum(i, j);
            bool is_max = true;
            bool above_some = false;
            for (int a = std::max(0, i - radius); a <= std::min(nr - 1, i + radius) && is_max; ++a)
                for (int b = std::max(0, j - radius); b <= std::min(nc - 1, j + radius); ++b) {
                    if (a == i && b == j)
                        continue;
                    if (spectrum(a, b) > v) {
                        is_max = false;
                        break;
                    }
                    if (spectrum(a, b) < v)
                        above_some = true;
                }
            if (is_max && above_some)
                cand.push_back({i, j, static_cast<double>(i), static_cast<double>(j), v});
        }
    std::stable_sort(cand.begin(), cand.end(),
                     [](const Peak2D& a, const Peak2D& b) { return a.height > b.height; });
    PeakList2D out;
    for (const Peak2D& c : cand) {
        if (static_cast<int>(out.peaks.size()) >= count)
            break;
        bool suppressed = false;
        for (const Peak2D& p : out.peaks)
            if (std::abs(p.row - c.row) <= radius && std::abs(p.col - c.col) <= radius)
                suppressed = true;
        if (suppressed)
            continue;
        Peak2D p = c;
        if (c.row > 0 && c.row < nr - 1)
            p.row_position = c.row + refine_offset(spectrum(c.row - 1, c.col), spectrum(c.row, c.col),
                                                   spectrum(c.row + 1, c.col), refine);
        if (c.col > 0 && c.col < nc - 1)
            p.col_position = c.col + refine_offset(spectrum(c.row, c.col - 1), spectrum(c.row, c.col),
                                                   spectrum(c.row, c.col + 1), refine);
        out.peaks.push_back(p);
    }
    out.shortfall = static_cast<int>(out.peaks.size()) < count;
    return out;
}

namespace {

CMat drop_column(const CMat& a, int keep)
{
    CMat out(a.rows(), std::max<Eigen::Index>(0, a.cols() - 1));
    Eigen::Index c = 0;
    for (Eigen::Index j = 0; j < a.cols(); ++j)
        if (j != keep)
            out.col(c++) = a.col(j);
    return out;
}

} // namespace

void refine_angle(const CMat& signal_basis, int nx, int ny, double h_theta, double h_phi, double& theta,
                  double& phi)
{
    for (int round = 0; round < 3; ++round) {
        theta = refine_minimum(
            [&](double t) { return music_denominator(signal_basis, steering_vector_upa(t, phi, nx, ny)); }, theta,
            h_theta);
        phi = refine_minimum(
            [&](double f) { return music_denominator(signal_basis, steering_vector_upa(theta, f, nx, ny)); }, phi,
            h_phi);
        h_theta *= 0.25;
        h_phi *= 0.25;
    }
}

CMat temporal_filter(const CMat& y, const CMat& group_steering, int keep)
{
    if (keep < 0 || keep >= group_steering.cols())
        throw std::invalid_argument("temporal_filter: keep index out of range");
    if (group_steering.cols() == 1)
        return y;
    return complement_projector(drop_column(group_steering, keep), y.rows()) * y;
}

CMat spatial_beamform(const CMat& yk, const CMat& angle_steering, int keep)
{
    if (keep < 0 || keep >= angle_steering.cols())
        throw std::invalid_argument("spatial_beamform: keep index out of range");
    if (angle_steering.cols() == 1)
        return yk;
    return yk * complement_projector(drop_column(angle_steering, keep), yk.cols()).conjugate();
}

TstMusicResult tst_music(const CMat& y, const TstMusicConfig& cfg)
{
    const Eigen::Index p = y.rows();
    const Eigen::Index nr = y.cols();
    if (p == 0 || nr == 0)
        throw std::invalid_argument("tst_music: empty observation");
    if (static_cast<Eigen::Index>(cfg.rows.size()) != p)
        throw std::invalid_argument("tst_music: row index list does not match Y");
    if (cfg.nx * cfg.ny != nr)
        throw std::invalid_argument("tst_music: antenna count does not match Y");

    const double fs = cfg.subcarrier_spacing;
    auto steer = [&](double tau) { return delay_steering_rows(tau, cfg.rows, fs); };
    TstMusicResult out;

    // Step 1: delay groups from the temporal covariance.
    const CMat rd = covariance_temporal(y, cfg.forward_backward);
    const int snaps = static_cast<int>(cfg.forward_backward ? 2 * nr : nr);
    SubspaceDecomposition full = eig_subspace(rd, 0);
    const Eigen::Index informative = std::min<Eigen::Index>(p, snaps);
    int kd = mdl_order(full.eigenvalues.head(informative), snaps);
    kd = std::min<int>(kd, static_cast<int>(p) - 1);
    if (cfg.max_paths > 0)
        kd = std::min(kd, cfg.max_paths);
    if (kd <= 0)
        throw NoPathsError("no detectable paths");
    const SubspaceDecomposition dd = eig_subspace(rd, kd);
    const Spectrum td = t_music_spectrum(dd, steer, cfg.delay_grid);
    out.flagged |= td.flagged > 0;
    const PeakList gp = peak_pick(td.values, kd, cfg.peak_radius, PeakRefine::reciprocal_parabolic);
    if (gp.peaks.empty())
        throw NoPathsError("no detectable paths");
    std::vector<double> groups;
    const double top = gp.peaks.front().height;
    auto group_den = [&](double tau) { return music_denominator(dd.signal_basis, steer(tau)); };
    for (const Peak& pk : gp.peaks)
        if (pk.height >= cfg.group_threshold * top)
            groups.push_back(refine_minimum(group_den, cfg.delay_grid.at(pk.position), 0.5 * cfg.delay_grid.step));
    std::sort(groups.begin(), groups.end());
    const int q = static_cast<int>(groups.size());
    CMat gmat(p, q);
    for (int k = 0; k < q; ++k)
        gmat.col(k) = steer(groups[static_cast<std::size_t>(k)]);

    out.groups.delays = groups;
    out.groups.angles.resize(static_cast<std::size_t>(q));
    out.groups.counts.assign(static_cast<std::size_t>(q), 0);

    std::vector<PathEstimate> paths;
    for (int k = 0; k < q; ++k) {
        // Step 2: temporal filtering.
        const CMat yk = temporal_filter(y, gmat, k);
        CMat others(p, q - 1);
        for (int j = 0, c = 0; j < q; ++j)
            if (j != k)
                others.col(c++) = gmat.col(j);
        const CMat pk = complement_projector(others, p);

        // Step 3: per-group angles.
        const CMat rs = covariance_spatial(yk, cfg.forward_backward);
        const SubspaceDecomposition sfull = eig_subspace(rs, 0);
        int r = mdl_order(sfull.eigenvalues, static_cast<int>(cfg.forward_backward ? 2 * p : p));
        r = std::clamp(r, 1, static_cast<int>(nr) - 1);
        if (cfg.max_paths > 0)
            r = std::min(r, std::max(1, cfg.max_paths - static_cast<int>(paths.size()) - (q - 1 - k)));
        const SubspaceDecomposition sd = eig_subspace(rs, r);
        const Spectrum2D ss = s_music_spectrum(sd, cfg.angle_grid, cfg.nx, cfg.ny);
        out.flagged |= ss.flagged > 0;
        const PeakList2D ap = peak_pick_2d(ss.values, r, cfg.peak_radius, PeakRefine::reciprocal_parabolic);
        out.flagged |= ap.shortfall;
        const int rk = static_cast<int>(ap.peaks.size());
        if (rk == 0)
            continue;
        CMat amat(nr, rk);
        std::vector<std::pair<double, double>> angs;
        for (int m = 0; m < rk; ++m) {
            double th = cfg.angle_grid.theta.at(ap.peaks[static_cast<std::size_t>(m)].row_position);
            double ph = cfg.angle_grid.phi.at(ap.peaks[static_cast<std::size_t>(m)].col_position);
            refine_angle(sd.signal_basis, cfg.nx, cfg.ny, 0.5 * cfg.angle_grid.theta.step,
                         0.5 * cfg.angle_grid.phi.step, th, ph);
            angs.emplace_back(th, ph);
            amat.col(m) = steering_vector_upa(th, ph, cfg.nx, cfg.ny);
        }

        // Delay window for Step 5: midpoints to the neighbouring groups.
        double lo = cfg.delay_grid.start;
        double hi = cfg.delay_grid.stop();
        if (k > 0)
            lo = 0.5 * (groups[static_cast<std::size_t>(k - 1)] + groups[static_cast<std::size_t>(k)]);
        if (k < q - 1)
            hi = 0.5 * (groups[static_cast<std::size_t>(k)] + groups[static_cast<std::size_t>(k + 1)]);
        const int i0 = std::max(0, static_cast<int>(std::ceil((lo - cfg.delay_grid.start) / cfg.delay_grid.step)));
        const int i1 = std::min(cfg.delay_grid.count - 1,
                                static_cast<int>(std::floor((hi - cfg.delay_grid.start) / cfg.delay_grid.step)));
        Grid1D window{cfg.delay_grid.at(i0), cfg.delay_grid.step, std::max(1, i1 - i0 + 1)};

        for (int m = 0; m < rk; ++m) {
            // Step 4: spatial beamforming; Step 5: per-beam delay.
            const CMat ykm = spatial_beamform(yk, amat, m);
            const SubspaceDecomposition bd = eig_subspace(covariance_temporal(ykm), 1);
            auto filtered = [&](double tau) -> CVec { return pk * steer(tau); };
            Grid1D search = window;
            Spectrum bs = t_music_spectrum(bd, filtered, search, true);
            Eigen::Index imax = 0;
            bs.values.maxCoeff(&imax);
            if (search.count > 1 && (imax == 0 || imax == bs.values.size() - 1)) {
                // The beam's path leaked in from another group; its delay lies outside the window.
                search = cfg.delay_grid;
                bs = t_music_spectrum(bd, filtered, search, true);
                bs.values.maxCoeff(&imax);
            }
            const PeakList bp = peak_pick(bs.values, 1, cfg.peak_radius, PeakRefine::reciprocal_parabolic);
            double tau = search.at(static_cast<double>(imax));
            if (!bp.peaks.empty())
                tau = search.at(bp.peaks.front().position);
            auto beam_den = [&](double t) { return music_denominator(bd.signal_basis, filtered(t)); };
            tau = refine_minimum(beam_den, tau, 0.5 * window.step);
            PathEstimate pe;
            pe.delay = tau;
            pe.azimuth = angs[static_cast<std::size_t>(m)].first;
            pe.elevation = angs[static_cast<std::size_t>(m)].second;
            paths.push_back(pe);
        }
        out.groups.angles[static_cast<std::size_t>(k)] = angs;
        out.groups.counts[static_cast<std::size_t>(k)] = rk;
    }
    if (paths.empty())
        throw NoPathsError("no detectable paths");

    const Eigen::Index kk = static_cast<Eigen::Index>(paths.size());
    CMat a(nr, kk), g(p, kk);
    for (Eigen::Index i = 0; i < kk; ++i) {
        const PathEstimate& pe = paths[static_cast<std::size_t>(i)];
        a.col(i) = steering_vector_upa(pe.azimuth, pe.elevation, cfg.nx, cfg.ny);
        g.col(i) = steer(pe.delay);
    }
    const LsResult ls = ls_solve(khatri_rao(a, g), vec(y));
    out.flagged |= ls.ridge;
    for (Eigen::Index i = 0; i < kk; ++i)
        paths[static_cast<std::size_t>(i)].gain = ls.x(i);
    std::stable_sort(paths.begin(), paths.end(), [](const PathEstimate& x, const PathEstimate& z) {
        const double px = std::norm(x.gain), pz = std::norm(z.gain);
        if (px != pz)
            return px > pz;
        return x.delay < z.delay;
    });
    out.paths = std::move(paths);
    out.model_order = static_cast<int>(out.paths.size());
    return out;
}

void write_spectrum_csv(std::ostream& os, const Grid1D& grid, const RVec& values)
{
    os << "grid,value\n";
    os.precision(17);
    for (int i = 0; i < grid.count && i < values.size(); ++i)
        os << grid.at(i) << ',' << values(i) << '\n';
}

} // namespace chanx
