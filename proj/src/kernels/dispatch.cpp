#include <atomic>
#include <cstdlib>
#include <iostream>
#include <string>

#include "voxelseg/errors.hpp"
#include "voxelseg/kernels.hpp"

namespace voxelseg::kernels {

// Defined in kernels_avx2.cpp (nullptr on non-x86 builds).
const KernelTable* avx2_kernels_impl();

namespace {

bool cpu_has_avx2_fma() {
#if defined(__x86_64__) || defined(_M_X64) || defined(__i386__)
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

std::atomic<const KernelTable*> g_active{nullptr};

const KernelTable* pick_auto() {
    const KernelTable* avx2 = avx2_kernels_impl();
    if (avx2 && cpu_has_avx2_fma())
        return avx2;
    return &scalar_kernels();
}

const KernelTable* resolve_from_env() {
    if (const char* env = std::getenv("VOXELSEG_KERNEL")) {
        const std::string want(env);
        if (want == "scalar")
            return &scalar_kernels();
        if (want == "avx2") {
            const KernelTable* avx2 = avx2_kernels_impl();
            if (avx2 && cpu_has_avx2_fma())
                return avx2;
            std::cerr << "voxelseg: VOXELSEG_KERNEL=avx2 unsupported on this CPU, "
                         "using scalar kernels\n";
            return &scalar_kernels();
        }
        if (want != "auto" && !want.empty())
            std::cerr << "voxelseg: unknown VOXELSEG_KERNEL '" << want
                      << "', using auto\n";
    }
    return pick_auto();
}

} // namespace

const KernelTable* avx2_kernels_ptr_for_tests();

const KernelTable* avx2_kernels() {
    const KernelTable* avx2 = avx2_kernels_impl();
    return (avx2 && cpu_has_avx2_fma()) ? avx2 : nullptr;
}

const KernelTable& active_kernels() {
    const KernelTable* t = g_active.load(std::memory_order_acquire);
    if (!t) {
        t = resolve_from_env();
        g_active.store(t, std::memory_order_release);
    }
    return *t;
}

std::string select_kernels(const std::string& name) {
    if (name == "scalar") {
        g_active.store(&scalar_kernels(), std::memory_order_release);
    } else if (name == "avx2") {
        const KernelTable* avx2 = avx2_kernels();
        if (!avx2)
            throw NumericalError("avx2 kernels unavailable on this CPU");
        g_active.store(avx2, std::memory_order_release);
    } else if (name == "auto") {
        g_active.store(pick_auto(), std::memory_order_release);
    } else {
        throw UsageError("unknown kernel table: " + name);
    }
    return g_active.load()->name;
}

} // namespace voxelseg::kernels
