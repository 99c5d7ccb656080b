#include <stdio.h>
#include <string.h>
#include "mdrnet.h"

#define CHECK(call)                                                        \
    do {                                                                   \
        MdrStatus s_ = (call);                                             \
        if (s_ != MDR_STATUS_OK) {                                         \
            fprintf(stderr, "%s -> %d: %s\n", #call, (int)s_,              \
                    mdr_last_error() ? mdr_last_error() : "(none)");       \
            return 1;                                                      \
        }                                                                  \
    } while (0)

int main(void) {
    MdrTensor *t = NULL;
    MdrMap *m = NULL;
    double a[2] = {1.0, 2.0}, b[2] = {3.0, 6.0}, got[2];
    size_t w, h, c;
    bool found = false;

    CHECK(mdr_tensor_new(2, 1, 4, 2, &t));
    CHECK(mdr_tensor_set(t, 0, 0, 0, a, 2));
    CHECK(mdr_tensor_set(t, 0, 0, 3, b, 2));
    CHECK(mdr_tensor_get(t, 0, 0, 3, got, 2, &found));
    if (!found || got[1] != 6.0) return 2;
    if (mdr_tensor_set(t, 5, 0, 0, a, 2) != MDR_STATUS_OUT_OF_BOUNDS) return 3;
    if (mdr_last_error() == NULL) return 4;

    CHECK(mdr_reduce(t, MDR_REDUCTION_MEAN_POOL, 0, &m));
    CHECK(mdr_map_shape(m, &w, &h, &c));
    double out[4];
    if (w * h * c != 4) return 5;
    CHECK(mdr_map_copy(m, out, 4));
    printf("mean %g %g vacant %g %g\n", out[0], out[1], out[2], out[3]);
    if (out[0] != 2.0 || out[1] != 4.0 || out[2] != 0.0) return 6;

    mdr_map_free(m);
    mdr_tensor_free(t);
    printf("mdrnet %s ok\n", mdr_version());
    return 0;
}
