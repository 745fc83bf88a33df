#include <math.h>
#include <stdio.h>
#include "facesearch.h"

#define CHECK(expr)                                                   \
    do {                                                              \
        FsStatus s_ = (expr);                                         \
        if (s_ != FS_STATUS_OK) {                                     \
            const char *e_ = fs_last_error();                         \
            fprintf(stderr, "%s -> %d: %s\n", #expr, s_, e_ ? e_ : ""); \
            return 1;                                                 \
        }                                                             \
    } while (0)

int main(void) {
    FsDataset *ds = NULL;
    CHECK(fs_dataset_generate("{\"n_classes\": 5, \"samples_per_class\": 12}", &ds));
    if (fs_dataset_len(ds) != 60) return 2;

    FsDataset *cleaned = NULL;
    char *report = NULL;
    CHECK(fs_clean(ds, 0.3, 0.9, 0, &cleaned, &report));
    fs_string_free(report);
    fs_dataset_free(cleaned);
    fs_dataset_free(ds);

    double dd, dl;
    const double combo[9] = {0.3, 0.62, 1.15, 0.22, 0, 40, 48, 1.22, 0.84};
    CHECK(fs_difficulty(combo, &dd, &dl));
    if (fabs(dd - 1.32) > 1e-12 || fabs(dl - 0.444) > 1e-12) return 3;

    FsSearchSpace *space = NULL;
    CHECK(fs_space_default(&space));
    size_t tokens[9] = {0};
    double values[9];
    CHECK(fs_space_decode(space, tokens, values));
    fs_space_free(space);

    FsBaseArch base = {8, 2, 16, 4};
    FsNetwork *net = NULL;
    CHECK(fs_network_instantiate(base, 1.0, 1.0, 1, &net));
    double x[8] = {1, 0, 0, 0, 0, 0, 0, 1}, emb[4];
    CHECK(fs_network_forward(net, x, 1, 8, emb));
    fs_network_free(net);

    if (fs_reward(0.9, 1.0, 0.0, -0.07, &dd) != FS_STATUS_INVALID_ARGUMENT) return 4;
    if (fs_last_error() == NULL) return 5;
    printf("ok %s\n", fs_version());
    return 0;
}
