#include "lulesh.h"

Real_t NormalizeCoords(Real_t *coords, Index_t n) {
  Real_t scale = 0.0;
  for (Index_t i = 0; i < n; ++i) {
    scale += coords[i] * coords[i];
  }
  if (scale > 0.0) {
    for (Index_t i = 0; i < n; ++i) {
      coords[i] /= scale;
    }
  }
  return scale;
}
