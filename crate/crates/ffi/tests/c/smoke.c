#include <math.h>
#include <stdio.h>
#include "dualtask.h"

int main(void) {
    double ratio = 0, expected = 0;
    if (dt_expected_step_cost(16, 13, 0.2, &ratio, &expected) != DT_STATUS_OK) return 1;
    if (ratio != 169.0 || expected != 34.6) return 2;

    DtMotionCategory cat;
    if (dt_categorize_motion(5.0, 12.0, &cat) != DT_STATUS_OK || cat != DT_MOTION_CATEGORY_DISCARDED) return 3;
    if (dt_categorize_motion(-1.0, 0.0, &cat) != DT_STATUS_DOMAIN || dt_last_error() == NULL) return 4;

    DtConfig *cfg = NULL;
    if (dt_config_parse("kind = \"theory\"\nbogus = 1\n", &cfg) != DT_STATUS_CONFIG) return 5;
    if (dt_config_parse("kind = \"theory\"\n", &cfg) != DT_STATUS_OK) return 6;
    char *text = NULL;
    if (dt_config_canonical(cfg, &text) != DT_STATUS_OK) return 7;
    dt_string_free(text);
    dt_config_free(cfg);

    double eig1[1] = {2.0}, eig2[1] = {1.0}, z0[1] = {1.0}, a[11];
    DtTaskPair *pair = NULL;
    if (dt_task_pair_new(eig1, eig2, 1, 0, 0.0, &pair) != DT_STATUS_OK) return 8;
    if (dt_mixture_gd(pair, 0.2, 0.1, z0, 10, 0, 0, a, NULL) != DT_STATUS_OK) return 9;
    if (fabs(a[10] - 2.0 * pow(0.82, 20)) > 1e-12) return 10;
    dt_task_pair_free(pair);
    printf("ok %s\n", dt_version());
    return 0;
}
