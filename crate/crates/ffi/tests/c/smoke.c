#include <math.h>
#include <stdio.h>
#include <string.h>

#include "avsr.h"

#define CHECK(cond)                                                   \
    do {                                                              \
        if (!(cond)) {                                                \
            fprintf(stderr, "%s:%d: %s\n", __FILE__, __LINE__, #cond); \
            return 1;                                                 \
        }                                                             \
    } while (0)

int main(int argc, char **argv) {
    CHECK(argc == 2);
    uint32_t ref[] = {1, 2, 3};
    uint32_t hyp[] = {1, 3};
    double w = 0.0;
    CHECK(avsr_wer(ref, 3, hyp, 2, &w) == AVSR_STATUS_OK);
    CHECK(fabs(w - 100.0 / 3.0) < 1e-12);
    CHECK(avsr_wer(NULL, 0, hyp, 2, &w) == AVSR_STATUS_INVALID_ARGUMENT);
    CHECK(strstr(avsr_last_error_message(), "non-empty") != NULL);

    double cells[AVSR_GRID_CELLS];
    for (int i = 0; i < AVSR_GRID_CELLS; i++) cells[i] = (double)i;
    double n = 0.0, nd = 0.0;
    CHECK(avsr_nwer(cells, &n, &nd) == AVSR_STATUS_OK);
    CHECK(fabs(n - 9.5) < 1e-12);
    CHECK(fabs(nd - 8.5) < 1e-12);

    AvsrTrainer *trainer = NULL;
    CHECK(avsr_trainer_new("[train]\nlearning_rat = 1.0\n", &trainer) == AVSR_STATUS_CONFIG);
    CHECK(trainer == NULL);
    const char *config =
        "[synth]\nframes = 5\nvocab = 3\nraw_channels = 3\nmin_duration = 1\nmax_duration = 2\nbabble_clips = 2\n"
        "[model]\ndim = 4\nheads = 2\nencoder_layers = 1\ndecoder_layers = 1\nffn_width = 8\npredictor_hidden = 3\n"
        "[train]\nsteps = 4\nbatch_size = 2\n";
    CHECK(avsr_trainer_new(config, &trainer) == AVSR_STATUS_OK);
    AvsrStepReport report;
    for (size_t i = 0; i < 2; i++) {
        CHECK(avsr_trainer_step(trainer, &report) == AVSR_STATUS_OK);
        CHECK(report.step == i);
        CHECK(report.total > 0.0 && report.l_asr > 0.0);
    }
    CHECK(avsr_trainer_save(trainer, argv[1]) == AVSR_STATUS_OK);
    avsr_trainer_free(trainer);

    AvsrCheckpoint *ckpt = NULL;
    CHECK(avsr_checkpoint_open(argv[1], &ckpt) == AVSR_STATUS_OK);
    size_t len = avsr_checkpoint_len(ckpt);
    CHECK(len > 0);
    size_t rows = 0, cols = 0;
    CHECK(avsr_checkpoint_shape(ckpt, 0, &rows, &cols) == AVSR_STATUS_OK);
    CHECK(rows > 0 && cols > 0);
    CHECK(avsr_checkpoint_data(ckpt, 0) != NULL);
    CHECK(avsr_checkpoint_name(ckpt, len) == NULL);
    printf("%zu %s\n", len, avsr_checkpoint_name(ckpt, 0));
    avsr_checkpoint_free(ckpt);
    return 0;
}
