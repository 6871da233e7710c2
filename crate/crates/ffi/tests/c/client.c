#include <stdio.h>
#include <string.h>

#include "fedgrid.h"

#define CHECK(call)                                                        \
    do {                                                                   \
        FgStatus s_ = (call);                                              \
        if (s_ != FG_STATUS_OK) {                                          \
            fprintf(stderr, "%s -> %d: %s\n", #call, s_, fg_last_error()); \
            return 1;                                                      \
        }                                                                  \
    } while (0)

int main(void) {
    printf("version %s\n", fg_version());

    FgEnv *env = NULL;
    CHECK(fg_env_new(NULL, 0, &env));
    size_t n_obs = fg_env_obs_dim(env), n_act = fg_env_action_dim(env);
    double obs[16];
    CHECK(fg_env_reset(env, 0, 0, obs, n_obs));
    double action[2] = {200.0, 50.0};
    FgStepResult r;
    CHECK(fg_env_step(env, action, n_act, obs, n_obs, &r));
    printf("dims %zu %zu\n", n_obs, n_act);
    printf("reward %.5f deviation %.4f\n", r.reward, r.deviation);

    FgStatus bad = fg_env_step(env, action, 1, obs, n_obs, &r);
    printf("short action -> %d (%s)\n", bad, fg_last_error());
    fg_env_free(env);

    double vectors[6] = {1.0, 2.0, 4.0, 5.0, 7.0, 8.0};
    double avg[2];
    CHECK(fg_aggregate(vectors, 3, 2, NULL, avg));
    printf("mean %.3f %.3f\n", avg[0], avg[1]);

    FgConvergenceReport reports[2];
    CHECK(fg_convergence_check(2, 5, 1.0, 10.0, 50, 2, reports));
    printf("convergence %d %d\n", reports[0].passed, reports[1].passed);

    FgAgent *agent = NULL;
    bad = fg_agent_load("/nonexistent/agent.ckpt", &agent);
    printf("missing checkpoint -> %d null=%d\n", bad, agent == NULL);
    return 0;
}
