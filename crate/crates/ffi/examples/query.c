#include <stdio.h>
#include "lrvi.h"

static const char *MODEL =
    "ATOMS\n"
    "attends binary 6\n"
    "hot binary 2\n"
    "PARFACTORS\n"
    "phi attends hot : ground-table 1.2 0.4 0.7 1.6\n";

int main(void) {
    LrviModel *model = NULL;
    if (lrvi_model_parse(MODEL, &model) != LRVI_STATUS_OK) {
        fprintf(stderr, "parse: %s\n", lrvi_last_error_message());
        return 1;
    }
    LrviResult *result = NULL;
    if (lrvi_infer(model, "hot\n1\n", "pmf:attends", LRVI_METHOD_ELIMINATION, 0, &result) != LRVI_STATUS_OK) {
        fprintf(stderr, "infer: %s\n", lrvi_last_error_message());
        lrvi_model_free(model);
        return 2;
    }
    double pmf[2];
    size_t len = 2;
    lrvi_result_estimate(result, pmf, &len);
    printf("%.6f %.6f\n", pmf[0], pmf[1]);
    if (lrvi_infer(model, NULL, "pmf:nobody", LRVI_METHOD_ELIMINATION, 0, &result) == LRVI_STATUS_OK) {
        return 3;
    }
    printf("%s\n", lrvi_last_error_message());
    lrvi_result_free(result);
    lrvi_model_free(model);
    return 0;
}
