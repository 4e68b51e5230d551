#include "lulesh.h"

Real_t VizMaxValue(const Real_t *field, Index_t n) {
  Real_t best = field[0];
  for (Index_t i = 1; i < n; ++i) {
    if (field[i] > best) {
      best = field[i];
    }
  }
  return best;
}
