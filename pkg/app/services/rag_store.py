"""Retrieval store for the technique pages and the success-case task trees."""

import hashlib
import json
import logging
import math
import re
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence, Union

import numpy as np
from rank_bm25 import BM25Okapi

from app.models.ptt import iter_nodes, parse_ptt
from app.utils.errors import BadDocument, PentestError, UnknownCorpus
from app.utils.types import PTT, Corpus, IngestSummary, RagDoc, RagHit

logger = logging.getLogger(__name__)

BM25_K1 = 1.2
BM25_B = 0.75

INDEX_FILENAME = "rag.index"
INDEX_MAGIC = "PENTEST-RAG-INDEX"
INDEX_VERSION = 1

CORPUS_GLOBS: dict[Corpus, str] = {
    Corpus.techniques: "**/*.md",
    Corpus.success_cases: "*.json",
}

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    """Lowercased alphanumeric runs; everything else separates tokens."""
    return _TOKEN_RE.findall(text.lower())


class Scorer(Protocol):
    """Anything that scores every indexed document against a tokenized query."""

    def get_scores(self, query: list[str]) -> np.ndarray: ...


class OkapiScorer(BM25Okapi):
    """BM25 with the non-negative IDF ``ln(1 + (N - n + 0.5) / (n + 0.5))``.

    The stock Okapi IDF goes negative for terms in more than half of the
    documents, which on a handful of success cases would push the best match
    below an unrelated one.
    """

    def __init__(self, corpus: list[list[str]], k1: float = BM25_K1, b: float = BM25_B):
        super().__init__(corpus, k1=k1, b=b)

    def _calc_idf(self, nd: dict[str, int]) -> None:
        for word, freq in nd.items():
            self.idf[word] = math.log(1 + (self.corpus_size - freq + 0.5) / (freq + 0.5))


ScorerFactory = Callable[[list[list[str]]], Scorer]


def as_corpus(corpus: Union[Corpus, str]) -> Corpus:
    try:
        return Corpus(corpus)
    except ValueError as e:
        raise UnknownCorpus(f"unknown corpus {corpus!r}; expected one of {[c.value for c in Corpus]}") from e


def doc_id_for(raw: bytes) -> str:
    return hashlib.sha256(raw).hexdigest()


def flatten_ptt(ptt: PTT) -> str:
    """Titles, details, commands and log summaries of every node, in tree order."""
    parts = [ptt.metadata.target.description]
    for node in iter_nodes(ptt):
        parts.extend([node.title, node.detail])
        for result in node.act_results:
            parts.extend([result.command, result.log_summary])
    return "\n".join(p for p in parts if p)


def _markdown_title(text: str, fallback: str) -> str:
    for line in text.splitlines():
        if line.startswith("# "):
            return line[2:].strip()
    return fallback


class RagStore:
    """Both retrieval corpora, persisted as one versioned index file.

    Documents are keyed by corpus and source path; re-ingesting identical
    bytes keeps the same doc_id and adds nothing.
    """

    def __init__(self, index_dir: Optional[Path] = None, scorer_factory: ScorerFactory = OkapiScorer):
        self.index_dir = Path(index_dir) if index_dir is not None else None
        self.scorer_factory = scorer_factory
        self._docs: dict[Corpus, dict[str, RagDoc]] = {corpus: {} for corpus in Corpus}
        self._scorers: dict[Corpus, tuple[list[RagDoc], Optional[Scorer]]] = {}

        if self.index_path is not None and self.index_path.is_file():
            self._load()

    @property
    def index_path(self) -> Optional[Path]:
        return self.index_dir / INDEX_FILENAME if self.index_dir is not None else None

    # ---- ingestion ------------------------------------------------------------

    def ingest(self, directory: Path, corpus: Union[Corpus, str]) -> IngestSummary:
        """Index every document of ``corpus`` found under ``directory``.

        The directory is the whole corpus: documents whose files are gone
        from it are dropped from the index.

        Args:
            directory: Corpus root; techniques are searched recursively.
            corpus: Which corpus the files belong to.

        Returns:
            Document and token counts for the corpus after ingestion, with
            how many documents were added and removed.
        """
        corpus = as_corpus(corpus)
        directory = Path(directory)
        if not directory.is_dir():
            raise BadDocument(str(directory), "corpus directory does not exist")

        files = sorted(p for p in directory.glob(CORPUS_GLOBS[corpus]) if p.is_file())
        if not files:
            logger.warning(f"EmptyCorpus: no {corpus.value} documents under {directory}")

        added = 0
        docs = self._docs[corpus]
        for path in files:
            doc = self._read_document(path, directory, corpus)
            existing = docs.get(doc.source_path)
            if existing is not None and existing.doc_id == doc.doc_id:
                continue
            docs[doc.source_path] = doc
            added += 1

        # Prune documents whose source files were deleted
        present = {path.relative_to(directory).as_posix() for path in files}
        stale = sorted(set(docs) - present)
        for source_path in stale:
            del docs[source_path]
            logger.info(f"Dropped {corpus.value} document {source_path}: file removed")

        if added or stale:
            self._scorers.pop(corpus, None)
            self._save()

        summary = IngestSummary(
            corpus=corpus,
            doc_count=len(docs),
            token_count=sum(len(tokenize(d.search_text)) for d in docs.values()),
            added=added,
            removed=len(stale),
        )
        logger.info(
            f"Ingested {corpus.value}: {summary.doc_count} docs ({added} new, {len(stale)} removed), {summary.token_count} tokens"
        )
        return summary

    def _read_document(self, path: Path, root: Path, corpus: Corpus) -> RagDoc:
        source_path = path.relative_to(root).as_posix()
        raw = path.read_bytes()
        try:
            text = raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise BadDocument(source_path, f"not UTF-8: {e}") from e

        if corpus is Corpus.techniques:
            title = _markdown_title(text, path.stem)
            search_text = f"{title}\n{text}"
        else:
            try:
                ptt = parse_ptt(text)
            except PentestError as e:
                raise BadDocument(source_path, f"not a valid PTT: {e}") from e
            title = ptt.metadata.target.description or path.stem
            search_text = flatten_ptt(ptt)

        return RagDoc(
            doc_id=doc_id_for(raw),
            corpus=corpus,
            title=title,
            body=text,
            source_path=source_path,
            search_text=search_text,
        )

    # ---- retrieval ------------------------------------------------------------

    def query(self, corpus: Union[Corpus, str], q: str, k: int) -> list[RagHit]:
        """Top-``k`` documents by score; ties go to the smaller doc_id.

        Documents sharing no term with the query score zero and are omitted.
        """
        corpus = as_corpus(corpus)
        if k <= 0:
            raise ValueError("k must be positive")

        docs, scorer = self._scorer(corpus)
        terms = tokenize(q)
        if scorer is None or not terms:
            return []

        scores = scorer.get_scores(terms)
        ranked = sorted(
            ((float(score), doc) for score, doc in zip(scores, docs) if score > 0),
            key=lambda pair: (-pair[0], pair[1].doc_id),
        )
        hits = [RagHit(doc=doc, score=score, rank=rank) for rank, (score, doc) in enumerate(ranked[:k], start=1)]
        logger.debug(f"query {corpus.value} {q!r}: {[h.doc.source_path for h in hits]}")
        return hits

    def _scorer(self, corpus: Corpus) -> tuple[list[RagDoc], Optional[Scorer]]:
        if corpus not in self._scorers:
            docs = sorted(self._docs[corpus].values(), key=lambda d: d.source_path)
            tokenized = [tokenize(d.search_text) for d in docs]
            # an index of empty documents has no average length to normalise by
            scorer = self.scorer_factory(tokenized) if any(tokenized) else None
            self._scorers[corpus] = (docs, scorer)
        return self._scorers[corpus]

    def get(self, doc_id: str) -> RagDoc:
        for docs in self._docs.values():
            for doc in docs.values():
                if doc.doc_id == doc_id:
                    return doc
        raise KeyError(doc_id)

    def count(self, corpus: Union[Corpus, str]) -> int:
        return len(self._docs[as_corpus(corpus)])

    def documents(self, corpus: Union[Corpus, str]) -> list[RagDoc]:
        return sorted(self._docs[as_corpus(corpus)].values(), key=lambda d: d.source_path)

    # ---- persistence ----------------------------------------------------------

    def _save(self) -> None:
        if self.index_path is None:
            return
        self.index_dir.mkdir(parents=True, exist_ok=True)
        payload = [doc.model_dump(mode="json") for corpus in Corpus for doc in self.documents(corpus)]
        tmp = self.index_path.with_suffix(".tmp")
        tmp.write_text(f"{INDEX_MAGIC} v{INDEX_VERSION}\n{json.dumps(payload, ensure_ascii=False)}\n", encoding="utf-8")
        tmp.replace(self.index_path)

    def _load(self) -> None:
        header, _, body = self.index_path.read_text(encoding="utf-8").partition("\n")
        if header != f"{INDEX_MAGIC} v{INDEX_VERSION}":
            raise BadDocument(str(self.index_path), f"unrecognised index header {header[:40]!r}")
        try:
            for item in json.loads(body):
                doc = RagDoc.model_validate(item)
                self._docs[doc.corpus][doc.source_path] = doc
        except (json.JSONDecodeError, ValueError) as e:
            raise BadDocument(str(self.index_path), f"unreadable index: {e}") from e
        logger.info(f"Loaded RAG index {self.index_path}: {sum(len(d) for d in self._docs.values())} docs")


def ingest_all(store: RagStore, corpora_dir: Path, corpora: Sequence[Corpus] = tuple(Corpus)) -> list[IngestSummary]:
    """Ingest the ``<corpora_dir>/<corpus>`` subdirectories that exist."""
    summaries = []
    for corpus in corpora:
        directory = Path(corpora_dir) / corpus.value
        if directory.is_dir():
            summaries.append(store.ingest(directory, corpus))
        else:
            logger.warning(f"No {corpus.value} corpus under {corpora_dir}")
    return summaries
