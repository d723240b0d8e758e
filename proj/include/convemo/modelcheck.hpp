#pragma once

#include <vector>

#include "convemo/gradcheck.hpp"
#include "convemo/seqmodel.hpp"
#include "convemo/tape.hpp"
#include "convemo/trainer.hpp"

namespace convemo {

// Mean cross-entropy over all utterances of `dialogs`, dropout off.
inline double model_loss(Model& model, const std::vector<Dialog>& dialogs) {
    double total = 0.0;
    long utts = 0;
    for (const auto& dlg : dialogs) {
        Tape tape;
        BoundModel b = bind_model(tape, model);
        ForwardResult fr = forward_dialog(tape, model, b, dlg, /*train=*/false);
        Var loss = tape.cross_entropy_sum(fr.logits, labels_of(dlg));
        total += loss->value.at(0, 0);
        utts += static_cast<long>(dlg.utterances.size());
    }
    return total / utts;
}

// Analytic gradient of model_loss for every parameter tensor.
inline GradStore model_grads(Model& model, const std::vector<Dialog>& dialogs) {
    long utts = 0;
    for (const auto& dlg : dialogs) utts += static_cast<long>(dlg.utterances.size());
    GradStore grads;
    for (const auto& dlg : dialogs) {
        Tape tape;
        BoundModel b = bind_model(tape, model);
        ForwardResult fr = forward_dialog(tape, model, b, dlg, /*train=*/false);
        Var loss = tape.cross_entropy_sum(fr.logits, labels_of(dlg));
        tape.backward(loss, 1.0 / utts);
        collect_grads(b, grads);
    }
    return grads;
}

// Full-model check: analytic gradients of every tensor against central
// differences on the same loss.
inline GradCheckReport check_model_gradients(Model& model, const std::vector<Dialog>& dialogs,
                                             double tol, double step = 1e-5) {
    GradStore analytic = model_grads(model, dialogs);
    std::vector<GradCheckParam> params;
    for (auto& p : model.param_refs()) {
        const Matrix* g = analytic.find(p.name);
        if (!g) throw NumericError("check_model_gradients: no gradient for " + p.name);
        params.push_back({p.name, p.tensor, g});
    }
    auto f = [&model, &dialogs] { return model_loss(model, dialogs); };
    return grad_check(f, std::move(params), tol, step);
}

}  // namespace convemo
