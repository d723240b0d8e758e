#pragma once

#include <optional>
#include <string>
#include <vector>

#include "convemo/data.hpp"
#include "convemo/matrix.hpp"
#include "convemo/tape.hpp"

namespace convemo {

enum class FusionMode { ATS, AT, ADD };

inline std::string to_string(FusionMode m) {
    switch (m) {
        case FusionMode::ATS: return "ATS";
        case FusionMode::AT: return "AT";
        case FusionMode::ADD: return "ADD";
    }
    return "?";
}

// Per-modality embedding matrices plus the fusion attention parameters.
// AT mode drops the speaker branch; ADD mode drops the attention (W_F, w_F).
struct FusionParams {
    FusionMode mode = FusionMode::ATS;
    Matrix W_a;  // d x D_a
    Matrix W_t;  // d x D_t
    Matrix W_s;  // d x D_s (absent in AT mode)
    Matrix W_F;  // d x d   (absent in ADD mode)
    Matrix w_F;  // d x 1   (absent in ADD mode)

    bool uses_speaker() const { return mode != FusionMode::AT; }
    bool uses_attention() const { return mode != FusionMode::ADD; }
    int modality_count() const { return mode == FusionMode::AT ? 2 : 3; }
};

// Tape handles for one forward pass over the fusion parameters.
struct FusionVars {
    Var W_a = nullptr, W_t = nullptr, W_s = nullptr, W_F = nullptr, w_F = nullptr;

    static FusionVars bind(Tape& tape, const FusionParams& p) {
        FusionVars v;
        v.W_a = tape.leaf(p.W_a);
        v.W_t = tape.leaf(p.W_t);
        if (p.uses_speaker()) v.W_s = tape.leaf(p.W_s);
        if (p.uses_attention()) {
            v.W_F = tape.leaf(p.W_F);
            v.w_F = tape.leaf(p.w_F);
        }
        return v;
    }
};

struct FusedUtterance {
    Var fused = nullptr;         // d x 1
    std::optional<Matrix> attn;  // 1 x M modality weights, absent in ADD mode
};

// Eq. semantics:
//   ATS:  u_cat = [W_a a, W_t t, W_s s]   (d x 3)
//         P = tanh(W_F u_cat), alpha = softmax(w_F^T P), f = u_cat alpha^T
//   AT:   same with the two-column u_cat = [W_a a, W_t t]
//   ADD:  f = W_a a + W_t t + W_s s, no attention weights
inline FusedUtterance fuse(Tape& tape, const FusionParams& p, const FusionVars& v,
                           const std::vector<double>& a, const std::vector<double>& t,
                           const std::vector<double>* s) {
    if (p.uses_speaker() && s == nullptr)
        throw ShapeError("fuse: mode " + to_string(p.mode) + " requires a speaker vector");
    Var ea = tape.matmul(v.W_a, tape.constant(Matrix::column(a)));
    Var et = tape.matmul(v.W_t, tape.constant(Matrix::column(t)));
    Var es = p.uses_speaker()
                 ? tape.matmul(v.W_s, tape.constant(Matrix::column(*s)))
                 : nullptr;

    FusedUtterance out;
    if (p.mode == FusionMode::ADD) {
        out.fused = tape.add(tape.add(ea, et), es);
        return out;
    }
    std::vector<Var> columns{ea, et};
    if (p.mode == FusionMode::ATS) columns.push_back(es);
    Var u_cat = tape.concat_cols(columns);                       // d x M
    Var proj = tape.tanh_ew(tape.matmul(v.W_F, u_cat));          // d x M
    Var alpha = tape.softmax_rows(tape.matmul(tape.transpose(v.w_F), proj));  // 1 x M
    out.fused = tape.matmul(u_cat, tape.transpose(alpha));       // d x 1
    out.attn = alpha->value;
    return out;
}

struct FusedDialog {
    std::vector<Var> fused;          // L entries, each d x 1
    std::vector<Matrix> attn;        // empty in ADD mode, else L rows of 1 x M
};

// Pointwise over utterances: f_i depends only on utterance i.
inline FusedDialog fuse_dialog(Tape& tape, const FusionParams& p, const FusionVars& v,
                               const Dialog& dialog) {
    if (dialog.utterances.empty())
        throw ShapeError("fuse_dialog: empty dialog " + dialog.id);
    FusedDialog out;
    for (const auto& u : dialog.utterances) {
        FusedUtterance fu = fuse(tape, p, v, u.acoustic, u.lexical, &u.speaker_emb);
        out.fused.push_back(fu.fused);
        if (fu.attn) out.attn.push_back(std::move(*fu.attn));
    }
    return out;
}

}  // namespace convemo
