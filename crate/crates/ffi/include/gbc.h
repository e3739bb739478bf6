/* C interface for gbc: generalized belief learning and belief-driven
 * coordination on Mini-Hanabi.
 *
 * Every fallible function returns a gbc_status code. On failure the most
 * recent error message for the calling thread can be read with
 * gbc_last_error(). Handles are opaque and must be released with the
 * matching *_free function; all free functions accept NULL.
 */

#ifndef GBC_H
#define GBC_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum gbc_status {
    GBC_OK = 0,
    GBC_ERR_NULL_ARGUMENT = 1,
    GBC_ERR_INVALID_ARGUMENT = 2,
    GBC_ERR_UTF8 = 3,
    GBC_ERR_IO = 4,
    GBC_ERR_INTERNAL = 5,
} gbc_status;

typedef enum gbc_evaluator {
    GBC_EVALUATOR_LEARNED = 0,
    GBC_EVALUATOR_GROUNDED = 1,
    GBC_EVALUATOR_EXACT = 2,
} gbc_evaluator;

typedef enum gbc_sampler {
    GBC_SAMPLER_EXACT = 0,
    GBC_SAMPLER_GROUNDED = 1,
    GBC_SAMPLER_NET = 2,
} gbc_sampler;

typedef enum gbc_tail {
    GBC_TAIL_ONE = 1,
    GBC_TAIL_TWO = 2,
} gbc_tail;

typedef struct GbcGame GbcGame;
typedef struct GbcPool GbcPool;
typedef struct GbcBelief GbcBelief;

/* Copies the calling thread's last error message (NUL-terminated,
 * truncated to len bytes) into buf. Returns the full message length in
 * bytes excluding the terminator. buf may be NULL to query the length. */
size_t gbc_last_error(char *buf, size_t len);

/* Games. */
int gbc_game_new_default(GbcGame **out);
int gbc_game_new_five_identity(GbcGame **out);
void gbc_game_free(GbcGame *game);
/* Accessors return -1 for a NULL handle. */
int gbc_game_num_identities(const GbcGame *game);
int gbc_game_hand_size(const GbcGame *game);
int gbc_game_max_score(const GbcGame *game);

/* Policy pools. */
int gbc_pool_new_scripted(const GbcGame *game, size_t n, uint64_t seed,
                          GbcPool **out);
void gbc_pool_free(GbcPool *pool);
int gbc_pool_len(const GbcPool *pool);

/* Belief models. */
int gbc_belief_train(const GbcPool *pool, uint64_t steps, uint64_t seed,
                     GbcBelief **out);
int gbc_belief_load(const char *path, GbcBelief **out);
int gbc_belief_save(const GbcBelief *belief, const char *path);
void gbc_belief_free(GbcBelief *belief);

/* Mean hand cross-entropy (nats per occupied slot) on pool self-play.
 * belief may be NULL for the grounded and exact evaluators. */
int gbc_belief_eval_ce(const GbcPool *pool, const GbcBelief *belief,
                       int evaluator, size_t games, uint64_t seed,
                       double *out_mean);

/* Cross-play of a search seat (blueprint = pool member `blueprint`,
 * hands sampled by `sampler`) against pool member `partner`. belief is
 * only consulted for GBC_SAMPLER_NET. */
int gbc_search_crossplay(const GbcPool *pool, const GbcBelief *belief,
                         int sampler, size_t blueprint, size_t partner,
                         size_t games, size_t samples_per_decision,
                         size_t rollouts_per_move, uint64_t seed,
                         double *out_mean, double *out_sem);

/* Permutation test for a difference in means, with a 99% Clopper-Pearson
 * interval on the Monte Carlo p-value. */
int gbc_permutation_test(const double *a, size_t len_a, const double *b,
                         size_t len_b, size_t resamples, int tail,
                         uint64_t seed, double *out_p, double *out_lower,
                         double *out_upper);

/* Exact binomial confidence interval for hits successes in n trials. */
int gbc_clopper_pearson(size_t hits, size_t n, double alpha,
                        double *out_lower, double *out_upper);

#ifdef __cplusplus
}
#endif

#endif /* GBC_H */
