/* C ABI for the rpdp privacy accountant and sampling-probability
 * estimator. Maintained by hand alongside ../src/lib.rs. */

#ifndef RPDP_H
#define RPDP_H

#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum rpdp_status {
  RPDP_OK = 0,
  RPDP_ERR_DOMAIN = 1,
  RPDP_ERR_FIT = 2,
  RPDP_ERR_NO_CONVERGENCE = 3,
  RPDP_ERR_NULL_POINTER = 4,
  RPDP_ERR_INTERNAL = 5,
} rpdp_status;

/* Opaque handles. */
typedef struct rpdp_params rpdp_params;
typedef struct rpdp_fit rpdp_fit;

/* Mechanism parameters. threat_client != 0 states the guarantee against
 * untrusted clients / third parties, 0 against the honest-but-curious
 * server. Returns NULL on invalid arguments. */
rpdp_params *rpdp_params_new(double sigma, double clip, double delta,
                             uint32_t local_steps, uint32_t rounds,
                             double client_prob, int32_t threat_client,
                             uint32_t max_alpha);
void rpdp_params_free(rpdp_params *params);

/* RDP of the Gaussian mechanism: alpha * clip^2 / (2 sigma^2). */
rpdp_status rpdp_gaussian_rdp(uint32_t alpha, double sigma, double clip,
                              double *out);

/* Per-step RDP bound of the Poisson-subsampled Gaussian mechanism at unit
 * sensitivity. */
rpdp_status rpdp_subsampled_gaussian_rdp(uint32_t alpha, double q,
                                         double sigma, double *out);

/* Optimal full-run DP budget for sampling probability q; out_alpha may be
 * NULL. */
rpdp_status rpdp_fl_epsilon(const rpdp_params *params, double q,
                            double *out_eps, uint32_t *out_alpha);

/* Simulate the eps*(q) grid and fit the exponential estimator. */
rpdp_status rpdp_fit_new(const rpdp_params *params, double q_floor,
                         rpdp_fit **out);

/* Rebuild an estimator from exported coefficients. */
rpdp_status rpdp_fit_load(double a, double b, double c, double r_squared,
                          double eps_full, double q_floor, rpdp_fit **out);

/* Budget -> sampling probability; out_never_sampled (may be NULL) is set
 * to 1 when the budget is below the achievable range and the record must
 * be excluded. */
rpdp_status rpdp_fit_estimate_q(const rpdp_fit *fit, double eps,
                                double *out_q, int32_t *out_never_sampled);

/* Export fitted coefficients; NULL out-pointers are skipped. */
rpdp_status rpdp_fit_coefficients(const rpdp_fit *fit, double *a, double *b,
                                  double *c, double *r_squared,
                                  double *eps_full, double *q_floor);

void rpdp_fit_free(rpdp_fit *fit);

#ifdef __cplusplus
}
#endif

#endif /* RPDP_H */
