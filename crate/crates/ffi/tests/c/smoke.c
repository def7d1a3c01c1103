#include <math.h>
#include <stdio.h>
#include <string.h>

#include "buckdrm.h"

#define CHECK(cond)                                                   \
    do {                                                              \
        if (!(cond)) {                                                \
            fprintf(stderr, "%s:%d: check failed: %s\n", __FILE__,    \
                    __LINE__, #cond);                                 \
            return 1;                                                 \
        }                                                             \
    } while (0)

int main(void) {
    CHECK(strlen(buckdrm_version()) > 0);

    BuckdrmPlantParams params;
    CHECK(buckdrm_plant_params_default(&params) == BUCKDRM_STATUS_OK);
    CHECK(params.v_in == 200.0 && isinf(params.resistance));

    BuckdrmPlant *plant = NULL;
    CHECK(buckdrm_plant_new(&params, NULL, 500.0, 7, &plant) == BUCKDRM_STATUS_OK);
    BuckdrmStepReport r;
    for (int k = 0; k < 10; k++) {
        CHECK(buckdrm_plant_step(plant, 0.5, &r) == BUCKDRM_STATUS_OK);
    }
    CHECK(fabs(r.v_o - 100.0) < 1e-9);
    CHECK(fabs(r.t - 1e-3) < 1e-12);
    buckdrm_plant_free(plant);

    BuckdrmDrm *drm = NULL;
    CHECK(buckdrm_drm_new(1.1, 0.002, 0.01, &drm) == BUCKDRM_STATUS_OK);
    double d = 0.0;
    bool sat = true;
    CHECK(buckdrm_drm_apply(drm, 0.5, 5.0, &d, &sat) == BUCKDRM_STATUS_OK);
    CHECK(fabs(d - 0.57) < 1e-12 && !sat);
    buckdrm_drm_free(drm);

    CHECK(buckdrm_drm_new(-1.0, 0.0, 0.0, &drm) == BUCKDRM_STATUS_INVALID_ARGUMENT);
    CHECK(drm == NULL);
    char msg[256];
    CHECK(buckdrm_last_error_message(msg, sizeof msg) > 0);
    CHECK(strstr(msg, "a > 0") != NULL);

    CHECK(buckdrm_plant_step(NULL, 0.5, &r) == BUCKDRM_STATUS_NULL_POINTER);
    puts("ok");
    return 0;
}
