#pragma once

// Scalar type selection. The library is compiled once per scalar type; each
// build lives in its own inline namespace so a 32-bit and a 64-bit build can
// be linked into the same binary (the 64-bit build backs the oracle tests).

#if defined(RATEKD_REAL_DOUBLE)
#define RATEKD_BEGIN_NAMESPACE \
  namespace ratekd {           \
  inline namespace f64 {
#define RATEKD_END_NAMESPACE \
  }                          \
  }
#else
#define RATEKD_BEGIN_NAMESPACE \
  namespace ratekd {           \
  inline namespace f32 {
#define RATEKD_END_NAMESPACE \
  }                          \
  }
#endif

RATEKD_BEGIN_NAMESPACE

#if defined(RATEKD_REAL_DOUBLE)
using Real = double;
inline constexpr bool kDoublePrecision = true;
#else
using Real = float;
inline constexpr bool kDoublePrecision = false;
#endif

RATEKD_END_NAMESPACE
