#pragma once

#include <string>

#include "fomox/errors.hpp"

namespace fomox {

// Severity tiers: each class (normal / outlier) split at the within-class
// median of the max-component log-density. Index order is fixed for
// serialization and confusion tables.
enum class Tier : int {
    SN = 0, // surely normal:   y=0, log-density above the inlier median
    LN = 1, // likely normal:   y=0, log-density at or below it
    LO = 2, // likely outlier:  y=1, log-density above the outlier median
    SO = 3, // surely outlier:  y=1, log-density at or below it
};

inline const char* tier_name(Tier t) {
    switch (t) {
        case Tier::SN: return "SN";
        case Tier::LN: return "LN";
        case Tier::LO: return "LO";
        case Tier::SO: return "SO";
    }
    throw DomainError("tier_name: invalid tier");
}

inline Tier tier_from_int(int v) {
    if (v < 0 || v > 3) throw DomainError("tier_from_int: " + std::to_string(v));
    return static_cast<Tier>(v);
}

// Tiers collapse to binary labels: {SN, LN} are the normal class.
inline int tier_label(Tier t) {
    return (t == Tier::SN || t == Tier::LN) ? 0 : 1;
}

} // namespace fomox
