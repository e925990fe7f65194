#pragma once

#include "radiance/rng.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <vector>

namespace radiance {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// x -> R x + t
struct RigidTransform {
    Mat3 rotation = Mat3::Identity();
    Vec3 translation = Vec3::Zero();

    Vec3 apply(const Vec3& x) const { return rotation * x + translation; }

    /// Applies to each row of an (n x 3) matrix.
    Eigen::MatrixXd apply_rows(const Eigen::MatrixXd& xs) const {
        Eigen::MatrixXd out = xs * rotation.transpose();
        out.rowwise() += translation.transpose();
        return out;
    }

    RigidTransform inverse() const { return {rotation.transpose(), -(rotation.transpose() * translation)}; }

    static RigidTransform translation_only(const Vec3& t) { return {Mat3::Identity(), t}; }
};

/// Uniformly distributed proper rotation (normalized Gaussian quaternion).
inline Mat3 random_rotation(Rng& rng) {
    Eigen::Quaterniond q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
    q.normalize();
    return q.toRotationMatrix();
}

inline RigidTransform random_rigid(Rng& rng, double translation_scale = 10.0) {
    RigidTransform g;
    g.rotation = random_rotation(rng);
    g.translation = Vec3(rng.normal(), rng.normal(), rng.normal()) * translation_scale;
    return g;
}

/// Optimal proper rigid transform mapping `mobile` rows onto `target` rows
/// (least squares, Kabsch with reflection correction).
inline RigidTransform kabsch(const Eigen::MatrixXd& mobile, const Eigen::MatrixXd& target) {
    if (mobile.rows() != target.rows() || mobile.cols() != 3 || target.cols() != 3) {
        throw std::invalid_argument("kabsch: point sets must be matching (n x 3)");
    }
    if (mobile.rows() == 0) throw std::invalid_argument("kabsch: empty point sets");
    const Vec3 cm = mobile.colwise().mean().transpose();
    const Vec3 ct = target.colwise().mean().transpose();
    Eigen::MatrixXd a = mobile.rowwise() - cm.transpose();
    Eigen::MatrixXd b = target.rowwise() - ct.transpose();
    const Mat3 h = a.transpose() * b;
    Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Mat3 d = Mat3::Identity();
    if ((svd.matrixV() * svd.matrixU().transpose()).determinant() < 0.0) d(2, 2) = -1.0;
    RigidTransform g;
    g.rotation = svd.matrixV() * d * svd.matrixU().transpose();
    g.translation = ct - g.rotation * cm;
    return g;
}

inline double rmsd_rows(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw std::invalid_argument("rmsd: shape mismatch");
    if (a.rows() == 0) return 0.0;
    return std::sqrt((a - b).rowwise().squaredNorm().mean());
}

}  // namespace radiance
