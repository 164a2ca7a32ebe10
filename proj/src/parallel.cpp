#include "putri/parallel.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace putri {

namespace {
bool g_parallel = true;
}

void set_parallel(bool enabled) { g_parallel = enabled; }

bool parallel_enabled() {
#ifdef _OPENMP
    return g_parallel;
#else
    return false;
#endif
}

void set_threads(int n) {
#ifdef _OPENMP
    if (n > 0) omp_set_num_threads(n);
#else
    (void)n;
#endif
}

}  // namespace putri
