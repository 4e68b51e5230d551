#include "lulesh.h"

void InitStressTerms(Domain *domain, Real_t *sig, Index_t n) {
#pragma omp parallel for
  for (Index_t i = 0; i < n; ++i) {
    sig[i] = -domain->m_x[i];
  }
#ifdef USE_MPI
  CommBuffer buf;
  buf.send = sig;
  buf.recv = sig;
  buf.count = n;
  CommExchange(domain, &buf);
#endif
}
