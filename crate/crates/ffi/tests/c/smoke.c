/* Type-checks the generated header against typical caller code. */
#include <stdio.h>
#include "dillema.h"

int run(const unsigned char *png, size_t len) {
    DillemaEdgeMap *map = NULL;
    if (dillema_canny_png(png, len, 0.1, 0.2, 1.4, &map) != DILLEMA_STATUS_OK) {
        char *msg = dillema_last_error_message();
        fprintf(stderr, "%s\n", msg ? msg : "unknown");
        dillema_string_free(msg);
        return 1;
    }
    unsigned char *out = NULL;
    size_t out_len = 0;
    dillema_edge_map_to_png(map, &out, &out_len);
    dillema_bytes_free(out, out_len);
    size_t edges = dillema_edge_map_count(map);
    dillema_edge_map_free(map);

    DillemaConfusion *m = NULL;
    double miou = 0.0;
    dillema_confusion_new(2, &m);
    dillema_confusion_add(m, 0, 0, 1);
    dillema_confusion_add(m, 0, 1, 1);
    dillema_confusion_add(m, 1, 1, 2);
    dillema_confusion_mean_iou(m, &miou);
    dillema_confusion_free(m);

    const unsigned char votes[5] = {1, 1, 1, 1, 0};
    DillemaVerdict verdict;
    dillema_consensus_verdict(votes, 5, &verdict);

    char *json = NULL;
    if (dillema_parse_stage_response(DILLEMA_STAGE_KEYWORDS, "KEYWORDS: [\"red\"]", &json) == DILLEMA_STATUS_OK) {
        dillema_string_free(json);
    }
    return (int)edges + (verdict == DILLEMA_VERDICT_VALID) + (miou > 0.5);
}
