import sys
import numpy as np
from acps import synth, pipeline, forest
from acps.pipeline import AcpsConfig, TrainingConfig

fc = forest.TrainConfig(n_trees=6, max_depth=8, min_leaf=8, n_candidates=200,
                        n_pos=300, n_neg=300, n_images=40, window_radius=5,
                        pos_radius=2.0, neg_margin=6.0, goodness='random')
tc = TrainingConfig(forest=fc, k_clusters=3, codebook_size=12)
base = AcpsConfig(scales=2, factor=0.8, dt_mode='fast')
cond = AcpsConfig(unary_mode='cond_hard', sharing=True, binary_mode='cond_hard',
                  scales=2, dt_mode='fast')

for n_dis in (3, 5):
    spec = synth.SyntheticSpec(
        actions=synth.default_action_specs(2),
        videos_per_action=4, frames_per_video=10,
        width=48, height=48, noise=0.02, n_distractors=n_dis,
    )
    diffs = []
    for seed in range(6):
        train_videos = synth.generate_synthetic(spec, seed=1000 + seed)
        test_videos = [synth.generate_video(spec, i % 2, f'test_{i:04d}', ss)
                       for i, ss in enumerate(np.random.SeedSequence(2000 + seed).spawn(8))]
        bundle = pipeline.train_models(train_videos, spec.action_names, tc,
                                       seed=seed, threads=1)
        per_config, priors = pipeline.run_videos(test_videos, bundle,
                                                 [base, cond], threads=1)
        anns = [v.annotation for v in test_videos]
        _, m_ind = pipeline.apk(per_config[0], anns, 0.1)
        _, m_cond = pipeline.apk(per_config[1], anns, 0.1)
        pri = sum(int(np.argmax(p.probs) == i % 2) for i, p in enumerate(priors))
        diffs.append(m_cond - m_ind)
        print(f'dis={n_dis} seed={seed}: indep={m_ind:.3f} cond={m_cond:.3f} '
              f'diff={m_cond - m_ind:+.3f} prior {pri}/8', flush=True)
    print(f'dis={n_dis}: nonneg={sum(d >= 0 for d in diffs)}/6 '
          f'strict={sum(d > 0 for d in diffs)}/6', flush=True)
