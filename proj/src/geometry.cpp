#include "dv/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <stdexcept>

#include <json.hpp>

#include "dv/io.hpp"

using nlohmann::json;

namespace dv {

Vec3 CameraCalib::to_camera(const Vec3& p) const {
    const auto& e = extrinsic;
    return Vec3{e[0] * p.x + e[1] * p.y + e[2] * p.z + e[3],
                e[4] * p.x + e[5] * p.y + e[6] * p.z + e[7],
                e[8] * p.x + e[9] * p.y + e[10] * p.z + e[11]};
}

void CameraCalib::validate() const {
    if (!(fx > 0.0) || !(fy > 0.0)) throw std::invalid_argument("calib: fx, fy must be > 0");
    if (img_h == 0 || img_w == 0) throw std::invalid_argument("calib: empty image size");
    // rotation block orthonormal within 1e-9, det +1
    const auto& e = extrinsic;
    double rtr[3][3] = {};
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) {
            for (int k = 0; k < 3; ++k) rtr[i][j] += e[k * 4 + i] * e[k * 4 + j];
        }
    }
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) {
            const double want = i == j ? 1.0 : 0.0;
            if (std::fabs(rtr[i][j] - want) > 1e-9) {
                throw std::invalid_argument("calib: rotation not orthonormal");
            }
        }
    }
    const double det =
        e[0] * (e[5] * e[10] - e[6] * e[9]) - e[1] * (e[4] * e[10] - e[6] * e[8]) +
        e[2] * (e[4] * e[9] - e[5] * e[8]);
    if (std::fabs(det - 1.0) > 1e-9) throw std::invalid_argument("calib: det(R) != +1");
    if (std::fabs(e[12]) > 1e-12 || std::fabs(e[13]) > 1e-12 || std::fabs(e[14]) > 1e-12 ||
        std::fabs(e[15] - 1.0) > 1e-12) {
        throw std::invalid_argument("calib: last extrinsic row must be [0,0,0,1]");
    }
}

CameraCalib load_calib(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("load_calib: cannot open " + path);
    json j = json::parse(is);
    CameraCalib c;
    c.fx = j.at("fx").get<double>();
    c.fy = j.at("fy").get<double>();
    c.cx = j.at("cx").get<double>();
    c.cy = j.at("cy").get<double>();
    auto ext = j.at("extrinsic").get<std::vector<double>>();
    if (ext.size() != 16) throw std::runtime_error("load_calib: extrinsic must have 16 entries");
    std::copy(ext.begin(), ext.end(), c.extrinsic.begin());
    auto hw = j.at("image_hw").get<std::vector<std::size_t>>();
    if (hw.size() != 2) throw std::runtime_error("load_calib: image_hw must have 2 entries");
    c.img_h = hw[0];
    c.img_w = hw[1];
    c.validate();
    return c;
}

void save_calib(const std::string& path, const CameraCalib& c) {
    json j;
    j["fx"] = c.fx;
    j["fy"] = c.fy;
    j["cx"] = c.cx;
    j["cy"] = c.cy;
    j["extrinsic"] = std::vector<double>(c.extrinsic.begin(), c.extrinsic.end());
    j["image_hw"] = {c.img_h, c.img_w};
    std::ofstream os(path);
    os << j.dump(2) << "\n";
    if (!os) throw std::runtime_error("save_calib: write failed for " + path);
}

void GridSpec::validate() const {
    if (!(cell_x > 0.0) || !(cell_y > 0.0)) throw std::invalid_argument("grid: cell sizes must be > 0");
    if (cols == 0 || rows == 0) throw std::invalid_argument("grid: extents must be > 0");
}

void save_cloud(const std::string& path, const PointCloud& pc) {
    Tensor t = Tensor::zeros({pc.size(), 4});
    for (std::size_t i = 0; i < pc.size(); ++i) {
        t.data()[i * 4 + 0] = pc.xyz[i].x;
        t.data()[i * 4 + 1] = pc.xyz[i].y;
        t.data()[i * 4 + 2] = pc.xyz[i].z;
        t.data()[i * 4 + 3] = pc.intensity[i];
    }
    io::save_tensor(path, t);
}

PointCloud load_cloud(const std::string& path) {
    Tensor t = io::load_tensor(path);
    if (t.rank() != 2 || t.dim(1) != 4) throw std::runtime_error("load_cloud: expects [P,4]");
    PointCloud pc;
    pc.xyz.resize(t.dim(0));
    pc.intensity.resize(t.dim(0));
    for (std::size_t i = 0; i < t.dim(0); ++i) {
        pc.xyz[i] = {t.data()[i * 4 + 0], t.data()[i * 4 + 1], t.data()[i * 4 + 2]};
        pc.intensity[i] = t.data()[i * 4 + 3];
    }
    return pc;
}

PvProjection project_to_pv(const std::vector<Vec3>& pts, const CameraCalib& calib) {
    calib.validate();
    const std::size_t n = pts.size();
    PvProjection out;
    out.u.resize(n);
    out.v.resize(n);
    out.depth.resize(n);
    out.valid.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const Vec3 pc = calib.to_camera(pts[i]);
        out.depth[i] = pc.z;
        const double z = pc.z != 0.0 ? pc.z : 1e-12;
        out.u[i] = calib.fx * pc.x / z + calib.cx;
        out.v[i] = calib.fy * pc.y / z + calib.cy;
        out.valid[i] = pc.z > 0.0 && out.u[i] >= 0.0 &&
                       out.u[i] < static_cast<double>(calib.img_w) && out.v[i] >= 0.0 &&
                       out.v[i] < static_cast<double>(calib.img_h);
    }
    return out;
}

BevProjection project_to_bev(const std::vector<Vec3>& pts, const GridSpec& grid) {
    grid.validate();
    const std::size_t n = pts.size();
    BevProjection out;
    out.row.resize(n);
    out.col.resize(n);
    out.nx.resize(n);
    out.ny.resize(n);
    out.valid.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double cxf = (pts[i].x - grid.origin_x) / grid.cell_x;
        const double cyf = (pts[i].y - grid.origin_y) / grid.cell_y;
        out.col[i] = static_cast<std::int64_t>(std::floor(cxf));
        out.row[i] = static_cast<std::int64_t>(std::floor(cyf));
        out.nx[i] = 2.0 * cxf / static_cast<double>(grid.cols) - 1.0;
        out.ny[i] = 2.0 * cyf / static_cast<double>(grid.rows) - 1.0;
        out.valid[i] = out.col[i] >= 0 && out.col[i] < static_cast<std::int64_t>(grid.cols) &&
                       out.row[i] >= 0 && out.row[i] < static_cast<std::int64_t>(grid.rows);
    }
    return out;
}

Pillars pillarize(const PointCloud& cloud, const GridSpec& grid, std::size_t max_points) {
    grid.validate();
    if (max_points == 0) throw std::invalid_argument("pillarize: max_points must be >= 1");
    const BevProjection proj = project_to_bev(cloud.xyz, grid);

    // cell id -> original point indices, in input order
    std::map<std::int64_t, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        if (!proj.valid[i]) continue;
        const std::int64_t cell = proj.row[i] * static_cast<std::int64_t>(grid.cols) + proj.col[i];
        groups[cell].push_back(i);
    }

    const std::size_t k = groups.size();
    Pillars out;
    out.features = Tensor::zeros({k, max_points, kPillarFeatureDim});
    out.slot_mask.assign(k * max_points, 0);
    out.cell_row.resize(k);
    out.cell_col.resize(k);

    std::size_t ki = 0;
    for (const auto& [cell, idxs] : groups) {
        out.cell_row[ki] = cell / static_cast<std::int64_t>(grid.cols);
        out.cell_col[ki] = cell % static_cast<std::int64_t>(grid.cols);
        const std::size_t count = std::min(idxs.size(), max_points);
        Vec3 mean{};
        for (std::size_t s = 0; s < count; ++s) {
            const Vec3& p = cloud.xyz[idxs[s]];
            mean.x += p.x;
            mean.y += p.y;
            mean.z += p.z;
        }
        mean.x /= static_cast<double>(count);
        mean.y /= static_cast<double>(count);
        mean.z /= static_cast<double>(count);
        const double center_x =
            grid.origin_x + (static_cast<double>(out.cell_col[ki]) + 0.5) * grid.cell_x;
        const double center_y =
            grid.origin_y + (static_cast<double>(out.cell_row[ki]) + 0.5) * grid.cell_y;
        for (std::size_t s = 0; s < count; ++s) {
            const std::size_t pi = idxs[s];
            const Vec3& p = cloud.xyz[pi];
            double* f = out.features.data() + (ki * max_points + s) * kPillarFeatureDim;
            f[0] = p.x;
            f[1] = p.y;
            f[2] = p.z;
            f[3] = cloud.intensity[pi];
            f[4] = p.x - mean.x;
            f[5] = p.y - mean.y;
            f[6] = p.z - mean.z;
            f[7] = p.x - center_x;
            f[8] = p.y - center_y;
            out.slot_mask[ki * max_points + s] = 1;
        }
        ++ki;
    }
    return out;
}

namespace {

// Rodrigues rotation matrix about unit axis.
void axis_angle_matrix(const Vec3& axis, double angle, double r[9]) {
    const double c = std::cos(angle), s = std::sin(angle), t = 1.0 - c;
    const double x = axis.x, y = axis.y, z = axis.z;
    r[0] = t * x * x + c;
    r[1] = t * x * y - s * z;
    r[2] = t * x * z + s * y;
    r[3] = t * x * y + s * z;
    r[4] = t * y * y + c;
    r[5] = t * y * z - s * x;
    r[6] = t * x * z - s * y;
    r[7] = t * y * z + s * x;
    r[8] = t * z * z + c;
}

Vec3 random_unit(RngState& rng) {
    while (true) {
        const Vec3 v{rng.normal(), rng.normal(), rng.normal()};
        const double n = std::sqrt(v.x * v.x + v.y * v.y + v.z * v.z);
        if (n > 1e-6) return Vec3{v.x / n, v.y / n, v.z / n};
    }
}

}  // namespace

CameraCalib perturb_calib(const CameraCalib& calib, double rot_lo_deg, double rot_hi_deg,
                          double trans_lo_cm, double trans_hi_cm, RngState& rng) {
    if (rot_lo_deg < 0.0 || rot_lo_deg > rot_hi_deg || trans_lo_cm < 0.0 ||
        trans_lo_cm > trans_hi_cm) {
        throw std::invalid_argument("perturb_calib: invalid range");
    }
    const Vec3 rot_axis = random_unit(rng);
    const double angle = rng.uniform(rot_lo_deg, rot_hi_deg) * M_PI / 180.0;
    const Vec3 trans_dir = random_unit(rng);
    const double trans = rng.uniform(trans_lo_cm, trans_hi_cm) * 0.01;

    double dr[9];
    axis_angle_matrix(rot_axis, angle, dr);

    CameraCalib out = calib;
    const auto& e = calib.extrinsic;
    // R' = dR * R ; t' = dR * t + dt
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 4; ++j) {
            double s = 0.0;
            for (int k = 0; k < 3; ++k) s += dr[i * 3 + k] * e[k * 4 + j];
            out.extrinsic[i * 4 + j] = s;
        }
    }
    out.extrinsic[3] += trans * trans_dir.x;
    out.extrinsic[7] += trans * trans_dir.y;
    out.extrinsic[11] += trans * trans_dir.z;

    // Re-orthonormalize (Gram-Schmidt) so repeated perturbations stay rigid.
    double r[3][3];
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) r[i][j] = out.extrinsic[i * 4 + j];
    }
    for (int i = 0; i < 3; ++i) {
        for (int k = 0; k < i; ++k) {
            double d = 0.0;
            for (int j = 0; j < 3; ++j) d += r[i][j] * r[k][j];
            for (int j = 0; j < 3; ++j) r[i][j] -= d * r[k][j];
        }
        double n = 0.0;
        for (int j = 0; j < 3; ++j) n += r[i][j] * r[i][j];
        n = std::sqrt(n);
        for (int j = 0; j < 3; ++j) r[i][j] /= n;
    }
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) out.extrinsic[i * 4 + j] = r[i][j];
    }
    out.validate();
    return out;
}

double relative_rotation_angle(const CameraCalib& a, const CameraCalib& b) {
    // trace(Ra * Rb^T)
    double tr = 0.0;
    for (int i = 0; i < 3; ++i) {
        double d = 0.0;
        for (int k = 0; k < 3; ++k) d += a.extrinsic[i * 4 + k] * b.extrinsic[i * 4 + k];
        tr += d;
    }
    const double c = std::clamp((tr - 1.0) * 0.5, -1.0, 1.0);
    return std::acos(c);
}

Tensor project_pv_norm(const Tensor& pts, const CameraCalib& calib, double z_min) {
    if (pts.rank() < 1 || pts.shape().back() != 3) {
        throw std::invalid_argument("project_pv_norm: expects [...,3]");
    }
    const std::size_t n = pts.size() / 3;
    Shape oshape = pts.shape();
    oshape.back() = 2;
    const double fw = 2.0 / static_cast<double>(calib.img_w);
    const double fh = 2.0 / static_cast<double>(calib.img_h);
    const auto ext = calib.extrinsic;
    const double fx = calib.fx, fy = calib.fy, cx = calib.cx, cy = calib.cy;

    Tensor out = make_node(oshape, {pts}, [n, ext, fx, fy, cx, cy, fw, fh, z_min](Node& self) {
        Node* p = self.parents[0].node();
        if (!p->requires_grad) return;
        double* gp = p->grad_buf();
        for (std::size_t i = 0; i < n; ++i) {
            const double* q = p->v.data() + i * 3;
            const double xc = ext[0] * q[0] + ext[1] * q[1] + ext[2] * q[2] + ext[3];
            const double yc = ext[4] * q[0] + ext[5] * q[1] + ext[6] * q[2] + ext[7];
            const double zc = ext[8] * q[0] + ext[9] * q[1] + ext[10] * q[2] + ext[11];
            if (zc < z_min) continue;  // clamped region: zero gradient
            const double gu = self.g[i * 2 + 0] * fw;
            const double gv = self.g[i * 2 + 1] * fh;
            const double inv_z = 1.0 / zc;
            const double du_dx = fx * inv_z;
            const double dv_dy = fy * inv_z;
            const double du_dz = -fx * xc * inv_z * inv_z;
            const double dv_dz = -fy * yc * inv_z * inv_z;
            for (int j = 0; j < 3; ++j) {
                const double dxc = ext[0 + j];
                const double dyc = ext[4 + j];
                const double dzc = ext[8 + j];
                gp[i * 3 + j] += gu * (du_dx * dxc + du_dz * dzc) +
                                 gv * (dv_dy * dyc + dv_dz * dzc);
            }
        }
    });
    for (std::size_t i = 0; i < n; ++i) {
        const double* q = pts.data() + i * 3;
        const double xc = ext[0] * q[0] + ext[1] * q[1] + ext[2] * q[2] + ext[3];
        const double yc = ext[4] * q[0] + ext[5] * q[1] + ext[6] * q[2] + ext[7];
        const double zc = ext[8] * q[0] + ext[9] * q[1] + ext[10] * q[2] + ext[11];
        if (zc < z_min) {
            out.data()[i * 2 + 0] = -10.0;
            out.data()[i * 2 + 1] = -10.0;
            continue;
        }
        const double u = fx * xc / zc + cx;
        const double v = fy * yc / zc + cy;
        out.data()[i * 2 + 0] = u * fw - 1.0;
        out.data()[i * 2 + 1] = v * fh - 1.0;
    }
    return out;
}

Tensor project_bev_norm(const Tensor& pts, const GridSpec& grid) {
    if (pts.rank() < 1 || pts.shape().back() != 3) {
        throw std::invalid_argument("project_bev_norm: expects [...,3]");
    }
    grid.validate();
    const std::size_t n = pts.size() / 3;
    Shape oshape = pts.shape();
    oshape.back() = 2;
    const double ax = 2.0 / (grid.cell_x * static_cast<double>(grid.cols));
    const double ay = 2.0 / (grid.cell_y * static_cast<double>(grid.rows));
    const double ox = grid.origin_x, oy = grid.origin_y;
    Tensor out = make_node(oshape, {pts}, [n, ax, ay](Node& self) {
        Node* p = self.parents[0].node();
        if (!p->requires_grad) return;
        double* gp = p->grad_buf();
        for (std::size_t i = 0; i < n; ++i) {
            gp[i * 3 + 0] += self.g[i * 2 + 0] * ax;
            gp[i * 3 + 1] += self.g[i * 2 + 1] * ay;
        }
    });
    for (std::size_t i = 0; i < n; ++i) {
        out.data()[i * 2 + 0] = (pts.data()[i * 3 + 0] - ox) * ax - 1.0;
        out.data()[i * 2 + 1] = (pts.data()[i * 3 + 1] - oy) * ay - 1.0;
    }
    return out;
}

}  // namespace dv
