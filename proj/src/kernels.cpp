#include "dv/kernels.hpp"

#include <cstdlib>

namespace dv::kern {

namespace {

Ops make_scalar() {
    return Ops{scalar::axpy, scalar::dot, scalar::add, scalar::mul,
               scalar::scale, scalar::gemm, scalar::gemm_at, scalar::gemm_bt,
               "scalar"};
}

#if defined(__x86_64__) || defined(_M_X64)
Ops make_avx2() {
    return Ops{avx2::axpy, avx2::dot, avx2::add, avx2::mul,
               avx2::scale, avx2::gemm, avx2::gemm_at, avx2::gemm_bt,
               "avx2"};
}
#endif

Ops select() {
    const char* force = std::getenv("DV_FORCE_SCALAR");
    if (force && force[0] == '1') return make_scalar();
#if defined(__x86_64__) || defined(_M_X64)
    if (__builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma")) {
        return make_avx2();
    }
#endif
    return make_scalar();
}

}  // namespace

const Ops& active() {
    static const Ops ops = select();
    return ops;
}

const Ops& scalar_ops() {
    static const Ops ops = make_scalar();
    return ops;
}

std::string backend_name() { return active().name; }

}  // namespace dv::kern
