// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace rank1lab {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// linalg
struct NonConvergence : Error { using Error::Error; };
struct DegenerateMatrix : Error { using Error::Error; };
struct ShapeMismatch : Error { using Error::Error; };
struct ZeroNorm : Error { using Error::Error; };
struct AllZero : Error { using Error::Error; };
struct TooFewValues : Error { using Error::Error; };

// checkpoint io
struct IoError : Error { using Error::Error; };
struct MalformedHeader : Error { using Error::Error; };
struct TruncatedPayload : Error { using Error::Error; };
struct DuplicateName : Error { using Error::Error; };
struct EmptyIntersection : Error { using Error::Error; };

// spectral
struct DegenerateDelta : Error { using Error::Error; };

// model
struct TokenOutOfRange : Error { using Error::Error; };
struct SequenceTooLong : Error { using Error::Error; };
struct TapeMismatch : Error { using Error::Error; };

// tasks
struct GenerationTimeout : Error { using Error::Error; };
struct DomainError : Error { using Error::Error; };

// rlvr
struct MissingReference : Error { using Error::Error; };
struct NanLoss : Error { using Error::Error; };

// alignment
struct RankMismatch : Error { using Error::Error; };

// config plumbing
struct ConfigError : Error { using Error::Error; };

} // namespace rank1lab
