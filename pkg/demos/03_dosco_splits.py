"""Turn per-example context features into domain labels and an OOD split.

We fake a feature extractor: each class has a handful of hidden contexts
(think "indoor", "snow", "beach"), and the feature vector of an example is
its context centre plus noise. K-means per class should recover those
contexts, and whole contexts then go either to training or to test.
"""

import numpy as np

from okd_forge import dosco, rng as rngmod


def main():
    g = np.random.default_rng(0)
    n_classes, contexts, per_context, dim = 5, 4, 600, 8
    centres = g.normal(scale=4.0, size=(n_classes, contexts, dim))
    rows, labels, truth = [], [], []
    for c in range(n_classes):
        for j in range(contexts):
            rows.append(centres[c, j] + g.normal(size=(per_context, dim)))
            labels += [c] * per_context
            truth += [j] * per_context
    table = dosco.FeatureTable(ids=[f"img{i:05d}" for i in range(len(labels))],
                               features=np.concatenate(rows), class_labels=np.array(labels))
    truth = np.array(truth)
    print(f"{len(table.ids)} examples, {n_classes} classes, {contexts} hidden contexts per class")

    split = dosco.build_domain_splits(table, k=contexts, split_seed=7)
    agree = 0
    for c in range(n_classes):
        rows_c = split.classes == c
        # each discovered domain should be (almost) a single hidden context
        for d in np.unique(split.domains[rows_c]):
            members = truth[rows_c & (split.domains == d)]
            agree += np.bincount(members).max()
    print(f"k-means purity against the hidden contexts: {agree / len(truth):.4f}")

    for c in range(2):
        print(f"class {c}: train domains {sorted(split.domains_with_role(c, 'train') | split.domains_with_role(c, 'val'))},"
              f" test domains {sorted(split.domains_with_role(c, 'test'))}")
    print(f"roles: train {split.count('train')}, val {split.count('val')}, test {split.count('test')}")

    small = dosco.subsample_2k(split, rngmod.stream(7, "two_k"))
    print(f"2k variant: train {small.count('train')}, val {small.count('val')}, test {small.count('test')}")

    # a predictor that memorised the domains it trained on and guesses elsewhere
    seen = split.roles != "test"
    pred = np.where(seen, split.classes, g.integers(0, n_classes, size=len(truth)))
    report = dosco.evaluate_split_report(split, pred)
    print(f"domain-memorising predictor: id={report.id_accuracy:.3f} ood={report.ood_accuracy:.3f} gap={report.gap:.3f}")


if __name__ == "__main__":
    main()
