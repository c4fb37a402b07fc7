#include "rectiflow/parallel.hpp"

namespace rectiflow {

namespace {
int g_threads = 0;
}

void set_thread_count(int n) { g_threads = n < 0 ? 0 : n; }

int thread_count() {
    if (g_threads > 0) return g_threads;
    if (const char* env = std::getenv("RECTIFLOW_THREADS")) {
        const int v = std::atoi(env);
        if (v > 0) return v;
    }
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

} // namespace rectiflow
