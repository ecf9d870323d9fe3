/* C ABI for the rocoma engine.
 *
 * Conventions:
 *  - Every function returns a rocoma_status code; ROCOMA_OK is 0. On any
 *    other code a thread-local message is set; read it with
 *    rocoma_last_error().
 *  - Objects cross the boundary as opaque handles created by _new-style
 *    constructors and destroyed by their _free function. _free accepts
 *    NULL. Handles are not thread-safe; share them only with external
 *    synchronization.
 *  - Actions use a padded layout of 2 * ROCOMA_NUM_SLOTS doubles per region
 *    (vacant simplex, then low-battery simplex), slots ordered stay, north,
 *    south, west, east. Slots pointing off the grid must be zero; each
 *    in-grid group must sum to 1. Regions are row-major.
 *  - Observations use ROCOMA_REGION_FIELDS doubles per region: vacant,
 *    low_battery, demand, empty_chargers, chargers.
 */

#ifndef ROCOMA_H
#define ROCOMA_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

enum rocoma_status {
  ROCOMA_OK = 0,
  ROCOMA_ERR_NULL_ARGUMENT = 1,
  ROCOMA_ERR_INVALID_ARGUMENT = 2,
  ROCOMA_ERR_CONFIG = 3,
  ROCOMA_ERR_IO = 4,
  ROCOMA_ERR_BUFFER_TOO_SMALL = 5,
  ROCOMA_ERR_PANIC = 6,
};
typedef int32_t rocoma_status_t;

/* Slots per region in the padded action layout. */
#define ROCOMA_NUM_SLOTS 5
/* Doubles per region in the observation layout. */
#define ROCOMA_REGION_FIELDS 5

/* Opaque simulator handle: environment plus its private RNG stream. */
typedef struct RocomaSim RocomaSim;

/* Opaque policy handle with its private action-sampling RNG stream. */
typedef struct RocomaPolicy RocomaPolicy;

/* Copy the last error message into buf (always NUL-terminated, truncated to
 * fit). Returns the full message length in bytes, excluding the NUL. buf may
 * be NULL to query only the length. */
size_t rocoma_last_error(char *buf, size_t len);

/* Library version as a static NUL-terminated string. */
const char *rocoma_version(void);

/* Create a simulator with the default city configuration. */
rocoma_status_t rocoma_sim_new_default(uint64_t seed, RocomaSim **out);

/* Create a simulator from TOML text holding a [sim] table (the same schema
 * the CLI's run configuration uses). */
rocoma_status_t rocoma_sim_new_from_toml(const char *toml_text, uint64_t seed,
                                         RocomaSim **out);

/* Destroy a simulator handle. NULL is a no-op. */
void rocoma_sim_free(RocomaSim *sim);

/* Redraw the initial state (fleet placement, batteries, time of day). */
rocoma_status_t rocoma_sim_reset(RocomaSim *sim);

/* Number of grid regions. */
rocoma_status_t rocoma_sim_num_regions(const RocomaSim *sim, size_t *out);

/* Grid dimensions. */
rocoma_status_t rocoma_sim_grid_size(const RocomaSim *sim, uint32_t *rows,
                                     uint32_t *cols);

/* Copy the current observation into buf: ROCOMA_REGION_FIELDS doubles per
 * region, regions row-major. buf_len is in doubles. */
rocoma_status_t rocoma_sim_observe(const RocomaSim *sim, double *buf,
                                   size_t buf_len);

/* Step counter and time-of-day fraction of the current state. Either output
 * may be NULL to skip it. */
rocoma_status_t rocoma_sim_time(const RocomaSim *sim, uint64_t *step,
                                double *time_of_day);

/* Apply one action (padded layout, action_len in doubles) and advance one
 * step. reward and cost may each be NULL to skip. */
rocoma_status_t rocoma_sim_step(RocomaSim *sim, const double *action,
                                size_t action_len, double *reward,
                                double *cost);

/* Create a baseline policy. name is one of "no", "edp", "rdp", "cop". */
rocoma_status_t rocoma_policy_baseline(const char *name, uint64_t seed,
                                       RocomaPolicy **out);

/* Load a trained policy from a checkpoint file produced by `rocoma train`. */
rocoma_status_t rocoma_policy_load(const char *path, uint64_t seed,
                                   RocomaPolicy **out);

/* Destroy a policy handle. NULL is a no-op. */
void rocoma_policy_free(RocomaPolicy *policy);

/* Sample an action for the simulator's current state into action_out
 * (padded layout, 2 * ROCOMA_NUM_SLOTS doubles per region). Advances the
 * policy's private RNG. */
rocoma_status_t rocoma_policy_act(RocomaPolicy *policy, const RocomaSim *sim,
                                  double *action_out, size_t action_len);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* ROCOMA_H */
