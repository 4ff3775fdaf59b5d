"""Seeded synthetic corpora and QA sets shared by the test suite."""

from __future__ import annotations

import json
import random

GENES = ["BRCA1", "TP53", "EGFR", "KRAS", "MYC", "PTEN", "HER2", "BRAF", "ALK", "VEGF", "CDK4", "JAK2"]
DISEASES = ["melanoma", "glioblastoma", "leukemia", "lymphoma", "carcinoma", "sarcoma", "myeloma", "neuroblastoma"]
TISSUES = ["hepatocytes", "tumor biopsies", "plasma samples", "T cells", "fibroblasts", "neurons", "epithelium"]
VERBS_BIO = ["upregulated", "downregulated", "phosphorylated", "overexpressed", "silenced", "methylated"]
DRUGS = ["imatinib", "gefitinib", "trastuzumab", "vemurafenib", "crizotinib", "ruxolitinib", "cisplatin"]
BIO_TEMPLATES = [
    "{gene} was {verb} in {tissue} from patients with {disease}.",
    "Treatment with {drug} inhibits {gene} signaling in {disease}.",
    "Mutations in {gene} are associated with resistance to {drug}.",
    "We observed that {gene} is {verb} in {tissue} after exposure to {drug}.",
    "The {gene} pathway regulates apoptosis in {disease} cell lines.",
]

NOUNS = ["dog", "teacher", "river", "market", "garden", "window", "train", "friend", "kitchen", "village"]
PLACES = ["station", "library", "harbor", "bakery", "stadium", "church", "bridge", "forest"]
VERBS_GEN = ["visited", "painted", "watched", "carried", "followed", "cleaned", "opened", "found"]
DAYS = ["Monday", "Sunday", "Friday", "Tuesday", "holiday", "weekend"]
GEN_TEMPLATES = [
    "The {noun} {verb} the {noun2} near the {place} on {day}.",
    "My {noun} said the {place} was closed last {day}.",
    "After lunch we {verb} an old {noun2} by the {place}.",
    "Every {day} the {noun} walks to the {place} with a {noun2}.",
    "Nobody {verb} the {noun} until the {place} opened again.",
]


def biomedical_text(n_sentences: int, seed: int) -> str:
    rng = random.Random(seed)
    out = []
    for _ in range(n_sentences):
        out.append(
            rng.choice(BIO_TEMPLATES).format(
                gene=rng.choice(GENES),
                verb=rng.choice(VERBS_BIO),
                tissue=rng.choice(TISSUES),
                disease=rng.choice(DISEASES),
                drug=rng.choice(DRUGS),
            )
        )
    return " ".join(out)


def general_text(n_sentences: int, seed: int) -> str:
    rng = random.Random(seed)
    out = []
    for _ in range(n_sentences):
        out.append(
            rng.choice(GEN_TEMPLATES).format(
                noun=rng.choice(NOUNS),
                noun2=rng.choice(NOUNS),
                verb=rng.choice(VERBS_GEN),
                place=rng.choice(PLACES),
                day=rng.choice(DAYS),
            )
        )
    return " ".join(out)


def toy_squad(n: int, seed: int = 0) -> dict:
    """SQuAD-format document whose answers are the drug named in each context."""
    rng = random.Random(seed)
    paragraphs = []
    for i in range(n):
        gene, drug, disease = rng.choice(GENES), rng.choice(DRUGS), rng.choice(DISEASES)
        context = f"{gene} is targeted by {drug} in {disease}."
        paragraphs.append(
            {
                "context": context,
                "qas": [
                    {
                        "id": f"q{i:04d}",
                        "question": f"Which drug targets {gene}?",
                        "answers": [{"text": drug, "answer_start": context.index(drug)}],
                    }
                ],
            }
        )
    return {"version": "toy", "data": [{"title": "toy", "paragraphs": paragraphs}]}


def bioasq_squad(n_questions: int, seed: int = 0) -> dict:
    """BioASQ factoid set in SQuAD layout: several snippets per question, some with multiple gold variants."""
    rng = random.Random(seed)
    data = []
    for i in range(n_questions):
        gene, disease = rng.choice(GENES), rng.choice(DISEASES)
        context = f"Recent studies link {gene} to {disease}. {gene} is frequently mutated in this setting."
        answers = [{"text": gene, "answer_start": context.index(gene)}]
        if i % 3 == 0:
            second = context.index(gene, answers[0]["answer_start"] + 1)
            answers.append({"text": gene, "answer_start": second})
        data.append(
            {
                "title": f"bioasq-{i}",
                "paragraphs": [
                    {"context": context, "qas": [{"id": f"{i:024x}", "question": f"Which gene is linked to {disease}?", "answers": answers}]}
                ],
            }
        )
    return {"version": "BioASQ4b", "data": data}


def write_json(path, doc: dict) -> None:
    path.write_text(json.dumps(doc), encoding="utf-8")
