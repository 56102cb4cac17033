#include <stdio.h>
#include "lidarcam_calib.h"

int main(void) {
    LcConfig *config = NULL;
    LcDataset *data = NULL;
    LcResult *result = NULL;
    lc_config_new(&config);
    lc_config_set(config, "sim.profile", "stationary-then-move");
    lc_config_set(config, "sim.duration", "14");
    lc_config_set(config, "sim.lag", "0.02");
    lc_config_set(config, "coarse.camera_onset_threshold", "20");
    if (lc_dataset_simulate(config, 3, &data) != LC_STATUS_OK ||
        lc_calibrate(data, config, LC_MODE_FULL, &result) != LC_STATUS_OK) {
        fprintf(stderr, "%s\n", lc_last_error_message());
        return 1;
    }
    double pose[7];
    lc_result_extrinsic_pose(result, pose);
    printf("tau %.3f ms, t = (%.3f, %.3f, %.3f)\n", lc_result_tau(result) * 1e3, pose[0], pose[1], pose[2]);
    lc_result_free(result);
    lc_dataset_free(data);
    lc_config_free(config);
    return 0;
}
