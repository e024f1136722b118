"""Synthetic social-network datasets plus the packaged mini-application fixtures.

Users get a Pareto-distributed popularity score; posts, comments,
reactions, media, and direct-message threads are assigned proportionally
to it. Message threads pair only mutual followers. A fixed seed yields a
byte-identical store.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import numpy as np

from transplant.clock import VirtualClock
from transplant.errors import SpecError
from transplant.mapping import SchemaMapping
from transplant.model import AppSchema, DagSpec, NodeId, SharingGrant
from transplant.specio import load_app_schema, load_dag_spec, load_mapping, parse_document
from transplant.store import AppBundle, AppStore, MetadataStore

FIXTURE_APPS = ("miniDiaspora", "miniMastodon", "miniTwitter", "miniGnuSocial")

# node-type role assignments per fixture app; the generator fills rows by
# combining these with each app's DAG edges, so it works for any of them.
_ROLES = {
    "miniDiaspora": {
        "root": "person",
        "post": "post",
        "comment": "comment",
        "reaction": "like",
        "thread": "conversation",
        "thread_item": "message",
        "media": "photo",
        "note": "notification",
    },
    "miniMastodon": {
        "root": "account",
        "post": "status",
        "comment": "reply",
        "reaction": "favourite",
        "thread": "convo",
        "thread_item": "chat_message",
        "media": "media",
    },
    "miniTwitter": {
        "root": "user",
        "post": "tweet",
        "comment": "reply",
        "reaction": "fav",
        "thread": "dm_thread",
        "thread_item": "dm",
        "media": "media",
    },
    "miniGnuSocial": {
        "root": "profile",
        "post": "notice",
        "comment": "notice_reply",
        "reaction": "fave",
        "thread": "direct_thread",
        "thread_item": "direct_message",
        "media": "attachment",
    },
}

_WORDS = (
    "harvest lantern orbit velvet quarry stream copper meadow cinder drift "
    "garnet hollow juniper skillet marble tempest willow anchor breeze canyon "
    "dapple ember folio glacier hazel ivory jasper kestrel lichen moss"
).split()

_LANGS = ("en", "de", "fr", "es", "pt")
_PLACES = ("harbor", "uptown", "valley", "old-town", "riverside")


def _fixture_text(name: str) -> str:
    return (
        resources.files("transplant.fixtures").joinpath(name).read_text()
    )


@lru_cache(maxsize=1)
def fixtures() -> tuple[dict, dict]:
    """Packaged (schema, dag) pairs and the direct mapping set.

    Returns (apps, mappings) where apps maps app_id -> (AppSchema, DagSpec)
    and mappings maps (from_app, to_app) -> SchemaMapping.
    """
    apps: dict[str, tuple[AppSchema, DagSpec]] = {}
    for app_id in FIXTURE_APPS:
        schema = load_app_schema(
            parse_document(_fixture_text(f"apps/{app_id}.schema.json"), f"{app_id}.schema")
        )
        dag = load_dag_spec(
            parse_document(_fixture_text(f"apps/{app_id}.dag.json"), f"{app_id}.dag"), schema
        )
        apps[app_id] = (schema, dag)

    mappings: dict[tuple[str, str], SchemaMapping] = {}
    for name in ("d_to_m", "m_to_d", "d_to_t", "t_to_g", "g_to_t", "m_to_g", "g_to_d"):
        doc = parse_document(_fixture_text(f"mappings/{name}.json"), name)
        src = doc.content["from_app"]
        dst = doc.content["to_app"]
        m = load_mapping(doc, apps[src][0], apps[dst][0])
        mappings[(src, dst)] = m
    return apps, mappings


def make_bundle(app_id: str, clock: VirtualClock | None = None) -> AppBundle:
    apps, _ = fixtures()
    schema, dag = apps[app_id]
    return AppBundle(schema=schema, dag=dag, store=AppStore(schema, clock=clock))


@dataclass
class GenConfig:
    users: int = 100
    seed: int = 0
    pareto_shape: float = 1.16
    posts_per_user: float = 4.0
    likes_per_post: float = 3.9
    comment_like_rate: float = 0.15
    comments_per_post: float = 1.8
    reply_fraction: float = 0.35
    follows_per_user: float = 2.7
    mutual_follow_rate: float = 0.06
    messages_per_thread: float = 40.0
    photos_per_user: float = 3.7
    note_like_rate: float = 0.4
    note_comment_rate: float = 0.6
    grant_fraction: float = 0.5
    media_bytes: tuple = (50_000, 4_000_000)
    created_step: int = 3

    def __post_init__(self):
        if self.users < 1:
            raise SpecError("user count must be >= 1")
        if self.pareto_shape <= 0:
            raise SpecError("Pareto shape must be positive")


class _Writer:
    """Fills rows for one app by combining role hints with its DAG edges."""

    def __init__(self, bundle: AppBundle, rng, cfg: GenConfig):
        self.bundle = bundle
        self.rng = rng
        self.cfg = cfg
        self.roles = _ROLES[bundle.app_id]
        self.tick = 0

    def _next_created(self) -> int:
        self.tick += self.cfg.created_step
        return self.tick

    def _words(self, n: int) -> str:
        picks = self.rng.integers(0, len(_WORDS), size=n)
        return " ".join(_WORDS[i] for i in picks)

    def _edge_attr(self, type_name: str, kind: str, parent_type: str | None = None):
        for edge in self.bundle.dag.edges_from(type_name, kind):
            if parent_type is None or edge.parent_type == parent_type:
                return edge.child_table, edge.child_attr
        return None

    def insert(self, role: str, owner=None, refs: dict | None = None, extra: dict | None = None):
        """Insert one node of the given role; returns its first-table key."""
        type_name = self.roles[role]
        nt = self.bundle.dag.node_type(type_name)
        schema = self.bundle.schema
        store = self.bundle.store
        refs = refs or {}
        rows: dict[str, dict] = {}
        first_key = None
        for table in nt.member_tables:
            spec = schema.table(table)
            row = {attr: None for attr in spec.attributes}
            if table == nt.member_tables[0]:
                key = store.next_id(table)
                first_key = key
            else:
                # 1:1 member tables share the first table's key via joins
                key = first_key
            row[spec.key] = key
            rows[table] = row

        own = self._edge_attr(type_name, "ownership")
        if own and owner is not None:
            rows[own[0]][own[1]] = owner
        for parent_role, value in refs.items():
            kind = "sharing" if parent_role == "@peer" else "dependency"
            parent_type = self.roles[parent_role] if parent_role != "@peer" else None
            spot = self._edge_attr(type_name, kind, parent_type)
            if spot and value is not None:
                rows[spot[0]][spot[1]] = value

        for table, row in rows.items():
            for attr, value in list(row.items()):
                if value is not None:
                    continue
                row[attr] = self._filler(attr, extra or {})
        for table, row in rows.items():
            store.insert(table, row[schema.table(table).key], row)
        return first_key

    def _filler(self, attr: str, extra: dict):
        if attr in extra:
            return extra[attr]
        if attr == "created_at":
            return self._next_created()
        if attr in ("text", "body", "content", "subject"):
            return self._words(int(self.rng.integers(4, 30)))
        if attr in ("bio", "note", "about", "fullname"):
            return self._words(int(self.rng.integers(3, 10)))
        if attr == "lang":
            return _LANGS[int(self.rng.integers(0, len(_LANGS)))]
        if attr == "loc":
            return _PLACES[int(self.rng.integers(0, len(_PLACES)))]
        if attr == "stub_hash":
            return f"{int(self.rng.integers(0, 2**32)):08x}"
        if attr == "byte_size":
            lo, hi = self.cfg.media_bytes
            return int(self.rng.integers(lo, hi))
        if attr == "source_app":
            return "native"
        return None


def generate(cfg: GenConfig, bundle: AppBundle, meta: MetadataStore | None = None) -> AppStore:
    """Populate the bundle's store with a popularity-skewed social dataset."""
    rng = np.random.default_rng(cfg.seed)
    writer = _Writer(bundle, rng, cfg)
    roles = writer.roles
    n = cfg.users

    weights = rng.pareto(cfg.pareto_shape, n) + 1.0
    probs = weights / weights.sum()
    scale = weights / weights.mean()

    root_type = roles["root"]
    name_attr = {"person": "username", "account": "acct", "user": "handle", "profile": "nickname"}
    roots = []
    for i in range(n):
        key = writer.insert("root", extra={name_attr[root_type]: f"user{i:05d}"})
        roots.append(key)
    roots = np.array(roots)

    def pick_user(exclude=None):
        idx = int(rng.choice(n, p=probs))
        if exclude is not None and roots[idx] == exclude:
            idx = (idx + 1) % n
        return int(roots[idx])

    # posts, with volume proportional to author popularity
    post_counts = rng.poisson(cfg.posts_per_user * scale)
    posts_by_user: dict[int, list[int]] = {int(r): [] for r in roots}
    all_posts: list[tuple[int, int]] = []  # (post key, author)
    post_owner: dict[int, int] = {}
    for i in range(n):
        for _ in range(int(post_counts[i])):
            author = int(roots[i])
            key = writer.insert("post", owner=author)
            posts_by_user[author].append(key)
            all_posts.append((key, author))
            post_owner[key] = author

    # comments: top-level on a post, or a reply depending only on its parent
    comments: list[tuple[int, int, int | None]] = []  # (key, author, post)
    comment_count = rng.poisson(cfg.comments_per_post * len(all_posts))
    per_post_comments: dict[int, list[int]] = {}
    for _ in range(int(comment_count)):
        post_key, post_author = all_posts[int(rng.integers(0, len(all_posts)))] if all_posts else (None, None)
        if post_key is None:
            break
        author = pick_user()
        thread = per_post_comments.setdefault(post_key, [])
        if thread and rng.random() < cfg.reply_fraction:
            parent = thread[int(rng.integers(0, len(thread)))]
            key = writer.insert("comment", owner=author, refs={"comment": parent})
        else:
            key = writer.insert("comment", owner=author, refs={"post": post_key})
        thread.append(key)
        comments.append((key, author, post_key))

    # reactions on posts and (more rarely) on comments
    reactions: list[tuple[int, int, int | None]] = []  # (key, author, post)
    for post_key, post_author in all_posts:
        for _ in range(int(rng.poisson(cfg.likes_per_post))):
            author = pick_user(exclude=post_author)
            if author == post_author:
                continue
            key = writer.insert("reaction", owner=author, refs={"post": post_key})
            reactions.append((key, author, post_key))
    for comment_key, comment_author, post_key in comments:
        if rng.random() < cfg.comment_like_rate:
            author = pick_user(exclude=comment_author)
            if author == comment_author:
                continue
            key = writer.insert("reaction", owner=author, refs={"comment": comment_key})
            reactions.append((key, author, None))

    # mutual follows become friend pairs; threads pair only friends
    friend_pairs: list[tuple[int, int]] = []
    seen_pairs = set()
    if n > 1:
        follow_counts = rng.poisson(cfg.follows_per_user * scale)
        for i in range(n):
            for _ in range(int(follow_counts[i])):
                j = int(rng.choice(n, p=probs))
                if j == i:
                    continue
                if rng.random() < cfg.mutual_follow_rate:
                    pair = (min(i, j), max(i, j))
                    if pair not in seen_pairs:
                        seen_pairs.add(pair)
                        friend_pairs.append(pair)

    threads = []
    for i, j in friend_pairs:
        a, b = int(roots[i]), int(roots[j])
        key = writer.insert("thread", owner=a, refs={"@peer": b})
        threads.append((key, a, b))
        for k in range(int(rng.poisson(cfg.messages_per_thread))):
            author = a if k % 2 == 0 else b
            writer.insert("thread_item", owner=author, refs={"thread": key})

    # media stubs, attached to the author's own posts when possible
    media_counts = rng.poisson(cfg.photos_per_user * scale)
    for i in range(n):
        author = int(roots[i])
        own_posts = posts_by_user[author]
        for _ in range(int(media_counts[i])):
            attach = None
            if own_posts and rng.random() < 0.7:
                attach = own_posts[int(rng.integers(0, len(own_posts)))]
            writer.insert("media", owner=author, refs={"post": attach})

    # notifications recording reaction/comment events, owned by the recipient
    if "note" in roles:
        for key, actor, post_key in reactions:
            if post_key is None or rng.random() >= cfg.note_like_rate:
                continue
            recipient = post_owner.get(post_key)
            if recipient == actor:
                continue
            writer.insert(
                "note",
                owner=recipient,
                refs={"post": post_key, "root": actor},
                extra={"kind": "like"},
            )
        for key, actor, post_key in comments:
            if rng.random() >= cfg.note_comment_rate:
                continue
            if post_key is None:
                continue
            recipient = post_owner.get(post_key)
            if recipient == actor:
                continue
            writer.insert(
                "note",
                owner=recipient,
                refs={"post": post_key, "root": actor},
                extra={"kind": "comment"},
            )

    if meta is not None:
        app_id = bundle.app_id
        for i, j in friend_pairs:
            if rng.random() >= cfg.grant_fraction:
                continue
            a = NodeId(app_id, root_type, (int(roots[i]),))
            b = NodeId(app_id, root_type, (int(roots[j]),))
            meta.add_grant(SharingGrant(grantor=a, grantee=b))
            meta.add_grant(SharingGrant(grantor=b, grantee=a))

    return bundle.store

