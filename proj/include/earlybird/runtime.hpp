#pragma once

// Process-wide tuning for the executables. Not needed for correctness.

#include <cblas.h>
#include <malloc.h>
#include <unistd.h>

#include <cctype>
#include <cstdlib>
#include <string>

namespace earlybird {

/// Keeps the large per-batch buffers on the heap instead of mapping fresh
/// pages for each, and makes OpenBLAS use its AVX2 kernels when its CPU
/// detection fell back to the generic target on a capable machine. The
/// latter requires re-executing the process once with OPENBLAS_CORETYPE set.
inline void tune_process(char** argv) {
    mallopt(M_MMAP_THRESHOLD, 32 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
    mallopt(M_TOP_PAD, 64 << 20);

    if (std::getenv("OPENBLAS_CORETYPE") != nullptr || argv == nullptr) {
        return;
    }
    std::string core = openblas_get_corename();
    for (auto& ch : core) {
        ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    }
    __builtin_cpu_init();
    if (core == "prescott" && __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma")) {
        setenv("OPENBLAS_CORETYPE", "Haswell", 1);
        execv("/proc/self/exe", argv);
        // exec failed: carry on with the generic kernels
    }
}

} // namespace earlybird
