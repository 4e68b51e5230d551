#include "lulesh.h"

void CalcForceForNodes(Domain *domain) {
  Index_t n = domain->m_numNode;
#pragma omp parallel for
  for (Index_t i = 0; i < n; ++i) {
    domain->m_x[i] += domain->m_y[i] * domain->m_z[i];
  }
#ifdef USE_MPI
  CommBuffer buf;
  buf.send = domain->m_x;
  buf.recv = domain->m_y;
  buf.count = n;
  CommExchange(domain, &buf);
#endif
}
