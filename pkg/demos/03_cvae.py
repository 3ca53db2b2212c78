"""
Fitting the latent model
========================

Train the conditional VAE on a handful of (context, continuation) pairs with
the policy backbone frozen, then check that prior samples have the variance
the prior head reports.
"""

import numpy as np

from i2b_lpo.cvae import CVAE, CvaeTrainer, encode_context, prior, sample_latents
from i2b_lpo.model import ModelConfig, Policy
from i2b_lpo.tokens import encode

policy = Policy(ModelConfig(d_model=16, n_layers=2, n_heads=2, max_seq_len=40, d_z=4), seed=1)
cvae = CVAE.for_policy(policy, d_enc=8, seed=1)
batch = [(encode("3+4="), encode("7E")), (encode("9-2*3="), encode("2*3=6;9-6=3E"))]

trainer = CvaeTrainer(cvae, policy)
for step in range(101):
    terms = trainer.step(batch, np.random.default_rng(step))
    if step % 20 == 0:
        print(f"step {step:3d}  -ELBO {float(terms.loss):8.3f}  recon {float(terms.reconstruction):8.3f}"
              f"  KL {float(terms.kl):.4f}")

# empirical variance of prior draws against exp(logvar)
ctx = encode("8-5*2=")
zs = np.stack([c.z for c in sample_latents(ctx, 5000, cvae, policy, np.random.default_rng(0))])
var = np.exp(prior(encode_context([ctx], cvae, policy), cvae).logvar.detach().numpy()[0])
print("sample variance / prior variance:", np.round(zs.var(axis=0) / var, 3))
