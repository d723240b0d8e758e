#include <catch_amalgamated.hpp>

#include <random>

#include "convemo/fusion.hpp"
#include "convemo/gradcheck.hpp"
#include "test_util.hpp"

using namespace convemo;
using testutil::random_matrix;

namespace {

FusionParams make_params(FusionMode mode, int d, int d_a, int d_t, int d_s,
                         std::mt19937_64& rng) {
    FusionParams p;
    p.mode = mode;
    p.W_a = random_matrix(d, d_a, rng, 0.5);
    p.W_t = random_matrix(d, d_t, rng, 0.5);
    if (p.uses_speaker()) p.W_s = random_matrix(d, d_s, rng, 0.5);
    if (p.uses_attention()) {
        p.W_F = random_matrix(d, d, rng, 0.5);
        p.w_F = random_matrix(d, 1, rng, 0.5);
    }
    return p;
}

std::vector<double> random_vec(int n, std::mt19937_64& rng) {
    std::normal_distribution<double> n01(0.0, 1.0);
    std::vector<double> v(n);
    for (double& x : v) x = n01(rng);
    return v;
}

}  // namespace

TEST_CASE("ATS with zero W_F yields uniform attention and the averaged sum") {
    std::mt19937_64 rng(1);
    const int d = 6, d_a = 5, d_t = 4, d_s = 3;
    FusionParams p = make_params(FusionMode::ATS, d, d_a, d_t, d_s, rng);
    p.W_F = Matrix(d, d);  // zero => P_F = 0 => uniform alpha

    auto a = random_vec(d_a, rng), t = random_vec(d_t, rng), s = random_vec(d_s, rng);
    Tape tape;
    FusionVars v = FusionVars::bind(tape, p);
    FusedUtterance fu = fuse(tape, p, v, a, t, &s);

    REQUIRE(fu.attn.has_value());
    for (int j = 0; j < 3; ++j)
        CHECK(fu.attn->at(0, j) == Catch::Approx(1.0 / 3.0).epsilon(1e-14));

    Matrix expected = scale(
        add(add(matmul(p.W_a, Matrix::column(a)), matmul(p.W_t, Matrix::column(t))),
            matmul(p.W_s, Matrix::column(s))),
        1.0 / 3.0);
    CHECK(max_abs_diff(fu.fused->value, expected) < 1e-12);
}

TEST_CASE("ATS with uniform attention equals ADD divided by 3") {
    std::mt19937_64 rng(2);
    const int d = 8, d_a = 6, d_t = 5, d_s = 4;
    FusionParams ats = make_params(FusionMode::ATS, d, d_a, d_t, d_s, rng);
    ats.W_F = Matrix(d, d);  // pins alpha to uniform
    FusionParams addp = ats;
    addp.mode = FusionMode::ADD;
    addp.W_F = Matrix();
    addp.w_F = Matrix();

    for (int trial = 0; trial < 20; ++trial) {
        auto a = random_vec(d_a, rng), t = random_vec(d_t, rng), s = random_vec(d_s, rng);
        Tape tape;
        FusedUtterance f_ats = fuse(tape, ats, FusionVars::bind(tape, ats), a, t, &s);
        FusedUtterance f_add = fuse(tape, addp, FusionVars::bind(tape, addp), a, t, &s);
        CHECK(!f_add.attn.has_value());
        CHECK(max_abs_diff(f_ats.fused->value, scale(f_add.fused->value, 1.0 / 3.0)) < 1e-12);
    }
}

TEST_CASE("AT mode uses two modalities, ADD requires the speaker vector") {
    std::mt19937_64 rng(3);
    const int d = 6;
    FusionParams at = make_params(FusionMode::AT, d, 5, 4, 3, rng);
    auto a = random_vec(5, rng), t = random_vec(4, rng);
    Tape tape;
    FusedUtterance fu = fuse(tape, at, FusionVars::bind(tape, at), a, t, nullptr);
    REQUIRE(fu.attn.has_value());
    CHECK(fu.attn->cols() == 2);
    CHECK(fu.fused->value.rows() == d);

    FusionParams addp = make_params(FusionMode::ADD, d, 5, 4, 3, rng);
    CHECK_THROWS_AS(fuse(tape, addp, FusionVars::bind(tape, addp), a, t, nullptr), ShapeError);
}

TEST_CASE("fusion attention weights stay on the simplex") {
    std::mt19937_64 rng(4);
    const int d = 6;
    FusionParams p = make_params(FusionMode::ATS, d, 5, 4, 3, rng);
    for (int trial = 0; trial < 200; ++trial) {
        auto a = random_vec(5, rng), t = random_vec(4, rng), s = random_vec(3, rng);
        Tape tape;
        FusedUtterance fu = fuse(tape, p, FusionVars::bind(tape, p), a, t, &s);
        double sum = 0.0;
        for (int j = 0; j < 3; ++j) {
            CHECK(fu.attn->at(0, j) >= 0.0);
            sum += fu.attn->at(0, j);
        }
        CHECK(std::abs(sum - 1.0) < 1e-12);
    }
}

TEST_CASE("fusion gradients match central differences") {
    std::mt19937_64 rng(5);
    const int d = 5, d_a = 4, d_t = 3, d_s = 3;
    FusionParams p = make_params(FusionMode::ATS, d, d_a, d_t, d_s, rng);
    auto a = random_vec(d_a, rng), t = random_vec(d_t, rng), s = random_vec(d_s, rng);
    Matrix w = random_matrix(d, 1, rng);  // fixed readout weights

    auto loss_value = [&] {
        Tape tape;
        FusionVars v = FusionVars::bind(tape, p);
        FusedUtterance fu = fuse(tape, p, v, a, t, &s);
        double sum = 0.0;
        for (int i = 0; i < d; ++i) sum += w.at(i, 0) * fu.fused->value.at(i, 0);
        return sum;
    };

    GradStore analytic;
    {
        Tape tape;
        FusionVars v = FusionVars::bind(tape, p);
        FusedUtterance fu = fuse(tape, p, v, a, t, &s);
        Var loss = tape.sum_all(tape.hadamard(fu.fused, tape.constant(w)));
        tape.backward(loss);
        analytic.accumulate("W_a", v.W_a->grad);
        analytic.accumulate("W_t", v.W_t->grad);
        analytic.accumulate("W_s", v.W_s->grad);
        analytic.accumulate("W_F", v.W_F->grad);
        analytic.accumulate("w_F", v.w_F->ensure_grad());
    }
    std::vector<GradCheckParam> params{
        {"W_a", &p.W_a, analytic.find("W_a")}, {"W_t", &p.W_t, analytic.find("W_t")},
        {"W_s", &p.W_s, analytic.find("W_s")}, {"W_F", &p.W_F, analytic.find("W_F")},
        {"w_F", &p.w_F, analytic.find("w_F")}};
    GradCheckReport r = grad_check(loss_value, params, 1e-5);
    for (const auto& e : r.entries) {
        INFO(e.name << " rel err " << e.max_rel_err);
        CHECK(e.passed);
    }
}

TEST_CASE("fuse_dialog is pointwise and order preserving") {
    std::mt19937_64 rng(6);
    const int d = 6;
    FusionParams p = make_params(FusionMode::ATS, d, 5, 4, 3, rng);

    Dialog dlg = testutil::random_dialog("d0", 5, 5, 4, 3, 4, rng);
    Tape tape;
    FusionVars v = FusionVars::bind(tape, p);
    FusedDialog fd = fuse_dialog(tape, p, v, dlg);
    REQUIRE(fd.fused.size() == 5);
    REQUIRE(fd.attn.size() == 5);

    // Reversing the dialog reverses F identically.
    Dialog rev = dlg;
    std::reverse(rev.utterances.begin(), rev.utterances.end());
    FusedDialog fr = fuse_dialog(tape, p, v, rev);
    for (int i = 0; i < 5; ++i)
        CHECK(max_abs_diff(fr.fused[i]->value, fd.fused[4 - i]->value) == 0.0);

    // Singleton dialog equals plain fuse.
    Dialog one = dlg;
    one.utterances.resize(1);
    FusedDialog f1 = fuse_dialog(tape, p, v, one);
    FusedUtterance direct = fuse(tape, p, v, dlg.utterances[0].acoustic,
                                 dlg.utterances[0].lexical, &dlg.utterances[0].speaker_emb);
    CHECK(max_abs_diff(f1.fused[0]->value, direct.fused->value) == 0.0);

    Dialog empty;
    empty.id = "empty";
    CHECK_THROWS_AS(fuse_dialog(tape, p, v, empty), ShapeError);
}

TEST_CASE("tilting one modality's projection increases its attention weight") {
    std::mt19937_64 rng(8);
    const int d = 6;
    FusionParams p = make_params(FusionMode::ATS, d, 5, 4, 3, rng);
    auto a = random_vec(5, rng), t = random_vec(4, rng), s = random_vec(3, rng);

    auto alpha_a = [&] {
        Tape tape;
        FusedUtterance fu = fuse(tape, p, FusionVars::bind(tape, p), a, t, &s);
        return fu.attn->at(0, 0);
    };
    // With W_F = I and w_F = 1, the acoustic score is sum tanh(W_a a). Choose
    // W_a so W_a a = c * ones: the score d*tanh(c) grows strictly with c while
    // the other columns stay fixed, so alpha_a must grow strictly.
    p.W_F = Matrix::identity(d);
    p.w_F = Matrix(d, 1, 1.0);
    double a_norm2 = 0.0;
    for (double x : a) a_norm2 += x * x;
    auto set_tilt = [&](double c) {
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < 5; ++j) p.W_a.at(i, j) = c * a[j] / a_norm2;
    };
    set_tilt(0.0);
    double prev = alpha_a();
    for (double c : {0.3, 0.8, 1.5}) {
        set_tilt(c);
        const double now = alpha_a();
        CHECK(now > prev);
        prev = now;
    }
}
