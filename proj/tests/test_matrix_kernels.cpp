#include <gtest/gtest.h>

#include <random>

#include "lmmfs/matrix_kernels.hpp"
#include "support/random.hpp"

using namespace lmmfs;
using lmmfs::test::random_matrix;
using lmmfs::test::random_symmetric;

namespace {

double rel_err(const Mat& a, const Mat& b) {
    return (a - b).norm() / std::max(1.0, b.norm());
}

}  // namespace

TEST(Vec, TwoByTwo) {
    Mat a(2, 2);
    a << 1, 2, 3, 4;
    Vec expect(4);
    expect << 1, 3, 2, 4;
    EXPECT_EQ(vec(a), expect);
    EXPECT_EQ(vec(Mat::Identity(2, 2)), (Vec(4) << 1, 0, 0, 1).finished());
}

TEST(Vec, ColumnMajorIndexScan) {
    std::mt19937_64 rng(1);
    const Mat a = random_matrix(3, 3, rng);
    const Vec v = vec(a);
    for (Index j = 0; j < 3; ++j)
        for (Index i = 0; i < 3; ++i) EXPECT_EQ(v[j * 3 + i], a(i, j));
    EXPECT_EQ(unvec(v, 3, 3), a);
}

TEST(Vech, Basics) {
    Mat a(2, 2);
    a << 1, 2, 2, 3;
    EXPECT_EQ(vech(a), (Vec(3) << 1, 2, 3).finished());
    EXPECT_EQ(vech(Mat::Identity(3, 3)), (Vec(6) << 1, 0, 0, 1, 0, 1).finished());
    EXPECT_THROW(vech(Mat::Zero(2, 3)), std::invalid_argument);
    EXPECT_EQ(unvech(vech(a)), a);
}

// Builds D_k column by column from the defining relation vec(S) = D_k vech(S)
// applied to the vech basis vectors.
Mat duplication_oracle(Index k) {
    const Index m = vech_size(k);
    Mat d(k * k, m);
    for (Index c = 0; c < m; ++c) {
        Vec e = Vec::Zero(m);
        e[c] = 1.0;
        Mat s = Mat::Zero(k, k);
        Index pos = 0;
        for (Index j = 0; j < k; ++j)
            for (Index i = j; i < k; ++i, ++pos)
                if (pos == c) s(i, j) = s(j, i) = 1.0;
        d.col(c) = vec(s);
    }
    return d;
}

TEST(Duplication, SmallCases) {
    EXPECT_EQ(duplication_matrix(1), Mat::Ones(1, 1));
    Mat d2(4, 3);
    d2 << 1, 0, 0, 0, 1, 0, 0, 1, 0, 0, 0, 1;
    EXPECT_EQ(duplication_matrix(2), d2);
}

TEST(Duplication, DefiningRelation) {
    std::mt19937_64 rng(2);
    for (Index k = 1; k <= 6; ++k) {
        EXPECT_EQ(duplication_matrix(k), duplication_oracle(k));
        for (int t = 0; t < 20; ++t) {
            const Mat s = random_symmetric(k, rng);
            EXPECT_LT((duplication_matrix(k) * vech(s) - vec(s)).norm(), 1e-14);
        }
    }
}

TEST(Elimination, Basics) {
    EXPECT_EQ(elimination_matrix(1), Mat::Ones(1, 1));
    Mat l(2, 2);
    l << 2.0, 0.0, 3.0, 5.0;
    EXPECT_EQ(elimination_matrix(2) * vec(l), (Vec(3) << 2, 3, 5).finished());
    for (Index k = 2; k <= 6; ++k) {
        const Mat prod = elimination_matrix(k) * duplication_matrix(k);
        EXPECT_EQ(prod, Mat::Identity(vech_size(k), vech_size(k)));
    }
}

TEST(Commutation, DefiningRelation) {
    EXPECT_EQ(commutation_matrix(1, 1).indices(), std::vector<Index>{0});
    Mat a(2, 2);
    a << 1, 2, 3, 4;
    const Vec vt = vec(a.transpose());
    EXPECT_EQ(commutation_matrix(2, 2).apply(vt), (Vec(4) << 1, 3, 2, 4).finished());

    std::mt19937_64 rng(3);
    for (Index m = 1; m <= 6; ++m)
        for (Index n = 1; n <= 6; ++n) {
            const Mat b = random_matrix(m, n, rng);
            const PermutationVector k = commutation_matrix(m, n);
            EXPECT_TRUE(k.is_bijection());
            EXPECT_EQ(k.apply(vec(b.transpose())), vec(b));
            const PermutationVector back = commutation_matrix(n, m);
            EXPECT_EQ(back.apply(k.apply(vec(b))), vec(b));
            EXPECT_EQ(k.to_dense() * vec(b.transpose()), vec(b));
        }
}

TEST(Symmetrizer, Properties) {
    EXPECT_EQ(symmetrizer(1), Mat::Ones(1, 1));
    std::mt19937_64 rng(4);
    for (Index k = 2; k <= 4; ++k) {
        const Mat n = symmetrizer(k);
        const Mat s = random_symmetric(k, rng);
        EXPECT_LT((n * vec(s) - vec(s)).norm(), 1e-14);
        const Mat a = random_matrix(k, k, rng);
        EXPECT_LT((n * vec(a) - vec(0.5 * (a + a.transpose()))).norm(), 1e-14);
        EXPECT_LT((n * n - n).norm(), 1e-14);
        Eigen::SelfAdjointEigenSolver<Mat> eig(n);
        const Index ones = (eig.eigenvalues().array() > 0.5).count();
        EXPECT_EQ(ones, vech_size(k));
        EXPECT_LT((n * duplication_matrix(k) - duplication_matrix(k)).norm(), 1e-14);
        const Mat m = random_matrix(3, k * k, rng);
        EXPECT_LT((right_symmetrize(m, k) - m * n).norm(), 1e-14);
        const Mat m2 = random_matrix(k * k, 3, rng);
        EXPECT_LT((left_symmetrize(m2, k) - n * m2).norm(), 1e-14);
    }
}

TEST(Symmetrizer, KronCommutes) {
    std::mt19937_64 rng(5);
    for (Index k = 2; k <= 4; ++k) {
        const Mat a = random_matrix(k + 1, k, rng);
        const Mat lhs = kron(a, a) * symmetrizer(k);
        const Mat rhs = symmetrizer(k + 1) * kron(a, a);
        EXPECT_LT(rel_err(lhs, rhs), 1e-13);
    }
}

TEST(VecM, Definition) {
    std::mt19937_64 rng(6);
    const Mat m = random_matrix(3, 4, rng);
    EXPECT_EQ(vec_m(m, 4), m);
    Mat row(1, 4);
    row << 1, 2, 3, 4;
    Mat expect(2, 2);
    expect << 1, 2, 3, 4;
    EXPECT_EQ(vec_m(row, 2), expect);
    EXPECT_THROW(vec_m(row, 3), std::invalid_argument);
}

TEST(VecM, BlockOuterMatchesLoop) {
    std::mt19937_64 rng(7);
    const Index blocks = 5, m = 3, c = 4;
    const Mat a = random_matrix(blocks * m, c, rng);
    const Mat b = random_matrix(blocks * m, c, rng);
    Mat loop = Mat::Zero(m, m);
    for (Index i = 0; i < blocks; ++i) loop += a.middleRows(i * m, m) * b.middleRows(i * m, m).transpose();
    EXPECT_LT(rel_err(sum_block_outer(a, b, m), loop), 1e-12);
    // The same identity written with vec_m directly on the transposes.
    const Mat direct = vec_m(Mat(a.transpose()), m).transpose() * vec_m(Mat(b.transpose()), m);
    EXPECT_LT(rel_err(direct, loop), 1e-12);
}

TEST(KronBlockSum, TrivialCases) {
    Mat g(1, 1), h(1, 1);
    g << 3.0;
    h << -2.0;
    EXPECT_DOUBLE_EQ(kron_block_sum(g, h, 1, 1)(0, 0), -6.0);
    const Mat i2 = Mat::Identity(2, 2);
    EXPECT_EQ(kron_block_sum(i2, i2, 2, 2), Mat::Identity(4, 4));
    EXPECT_THROW(kron_block_sum(Mat::Zero(3, 4), Mat::Zero(3, 4), 2, 2), std::invalid_argument);
}

TEST(KronBlockSum, MatchesLoop) {
    std::mt19937_64 rng(8);
    for (auto [c1, c2, n1, n2] : std::vector<std::array<Index, 4>>{{3, 2, 2, 2}, {4, 3, 2, 3}, {2, 5, 3, 1}, {1, 1, 4, 2}}) {
        const Mat g = random_matrix(c1 * n1, c2 * n2, rng);
        const Mat h = random_matrix(c1 * n1, c2 * n2, rng);
        Mat loop = Mat::Zero(n1 * n1, n2 * n2);
        for (Index i = 0; i < c1; ++i)
            for (Index j = 0; j < c2; ++j)
                loop += kron(g.block(i * n1, j * n2, n1, n2), h.block(i * n1, j * n2, n1, n2));
        EXPECT_LT(rel_err(kron_block_sum(g, h, n1, n2), loop), 1e-12);
    }
}

TEST(ProjectPsd, Examples) {
    std::mt19937_64 rng(9);
    const Mat b = random_matrix(4, 4, rng);
    const Mat psd = b * b.transpose();
    EXPECT_LT((project_psd(psd) - psd).norm(), 1e-10);
    Mat d = Mat::Zero(2, 2);
    d(0, 0) = -1.0;
    d(1, 1) = 2.0;
    Mat expect = Mat::Zero(2, 2);
    expect(1, 1) = 2.0;
    EXPECT_LT((project_psd(d) - expect).norm(), 1e-14);
    for (int t = 0; t < 20; ++t) {
        const Mat s = random_symmetric(5, rng);
        const Mat p = project_psd(s);
        EXPECT_GE(min_eigenvalue(p), -1e-12);
        EXPECT_LT((project_psd(p) - p).norm(), 1e-10);
        // Equal to the direct eigen-clamp construction.
        Eigen::SelfAdjointEigenSolver<Mat> eig(s);
        const Mat direct = eig.eigenvectors() * eig.eigenvalues().cwiseMax(0.0).asDiagonal() *
                           eig.eigenvectors().transpose();
        EXPECT_LT((p - direct).norm(), 1e-10);
    }
    Mat bad = Mat::Identity(2, 2);
    bad(0, 1) = std::numeric_limits<double>::quiet_NaN();
    EXPECT_THROW(project_psd(bad), NumericalError);
}

void expect_penrose(const Mat& a, const Mat& g) {
    const double scale = std::max(1.0, a.norm() * g.norm());
    EXPECT_LT((a * g * a - a).norm() / scale, 1e-8);
    EXPECT_LT((g * a * g - g).norm() / scale, 1e-8);
    EXPECT_LT(((a * g).transpose() - a * g).norm() / scale, 1e-8);
    EXPECT_LT(((g * a).transpose() - g * a).norm() / scale, 1e-8);
}

TEST(PseudoInverse, Examples) {
    std::mt19937_64 rng(10);
    const Mat a = random_matrix(4, 4, rng) + 4.0 * Mat::Identity(4, 4);
    EXPECT_LT(rel_err(pseudo_inverse(a), a.inverse()), 1e-12);
    const Mat z = Mat::Zero(3, 2);
    const Mat zp = pseudo_inverse(z);
    EXPECT_EQ(zp.rows(), 2);
    EXPECT_EQ(zp.cols(), 3);
    EXPECT_EQ(zp.norm(), 0.0);
    const Mat n2 = symmetrizer(2);
    expect_penrose(n2, pseudo_inverse(n2));
    const Mat low = random_matrix(5, 2, rng) * random_matrix(2, 4, rng);
    expect_penrose(low, pseudo_inverse(low));
}

TEST(PermutationVector, KronIdentityMatchesDense) {
    const PermutationVector k = commutation_matrix(2, 3);
    const Mat dense = kron(kron(Mat::Identity(3, 3), k.to_dense()), Mat::Identity(2, 2));
    EXPECT_EQ(k.kron_identity(3, 2).to_dense(), dense);
    EXPECT_EQ(k.inverse().to_dense(), k.to_dense().transpose());
}
