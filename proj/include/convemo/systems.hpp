#pragma once

#include <string>

#include "convemo/seqmodel.hpp"

namespace convemo {

// Ablation system presets:
//   S1  A+T    AT-Fusion   SA-GRU
//   S2  A+T+S  ADD         SA-GRU
//   S3  A+T+S  ATS-Fusion  Attention
//   S4  A+T+S  ATS-Fusion  Bi-GRU
//   S5  A+T+S  ATS-Fusion  SA-GRU
struct SystemPreset {
    std::string name;
    std::string modalities;
    FusionMode fusion;
    ClassifierMode classifier;
};

inline SystemPreset system_preset(const std::string& name) {
    if (name == "S1") return {"S1", "A+T", FusionMode::AT, ClassifierMode::SaGru};
    if (name == "S2") return {"S2", "A+T+S", FusionMode::ADD, ClassifierMode::SaGru};
    if (name == "S3") return {"S3", "A+T+S", FusionMode::ATS, ClassifierMode::AttnOnly};
    if (name == "S4") return {"S4", "A+T+S", FusionMode::ATS, ClassifierMode::GruOnly};
    if (name == "S5") return {"S5", "A+T+S", FusionMode::ATS, ClassifierMode::SaGru};
    throw DataError("unknown system preset: " + name + " (expected S1..S5)");
}

inline std::string fusion_label(FusionMode m) {
    switch (m) {
        case FusionMode::AT: return "AT-Fusion";
        case FusionMode::ADD: return "ADD";
        case FusionMode::ATS: return "ATS-Fusion";
    }
    return "?";
}

inline std::string classifier_label(ClassifierMode m) {
    switch (m) {
        case ClassifierMode::SaGru: return "SA-GRU";
        case ClassifierMode::AttnOnly: return "Attention";
        case ClassifierMode::GruOnly: return "Bi-GRU";
    }
    return "?";
}

}  // namespace convemo
