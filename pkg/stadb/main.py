"""
STADB Inference Service
=======================
Lädt beim Start einen Checkpoint und bettet die Galerie ein.

- GET  /health              Status
- GET  /model               Modell-Info (Parameter, Zweige, Config)
- POST /rank                Galerie für ein Query-Bild sortieren
- POST /evaluate            Query-Verzeichnis gegen die Galerie auswerten
- GET  /runs, /runs/{name}/log   Trainingsläufe (siehe runs.py)
"""

import contextlib
import logging
from pathlib import Path
from typing import List, Optional

from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel

from . import __version__
from .checkpoint import load_checkpoint
from .config import Config, settings
from .dataset import DatasetIndex, image_from_file, load_dataset, parse_filename
from .errors import ContractError, DimensionError, EvaluationError, IngestionError, PersistenceError, StadbError
from .evaluation import GalleryItem, make_items, rank_and_filter
from .net import ModelParams, embed_images
from .runs import router as runs_router
from .trainer import evaluate_model

logger = logging.getLogger(__name__)

# Query ohne parsebaren Dateinamen: passt zu keiner Galerie-Identität, nichts wird gefiltert
UNKNOWN_IDENTITY = -2


class ModelState:
    def __init__(self):
        self.params: Optional[ModelParams] = None
        self.config: Optional[Config] = None
        self.gallery: Optional[DatasetIndex] = None
        self.items: List[GalleryItem] = []

    @property
    def loaded(self) -> bool:
        return self.params is not None

    def load(self, checkpoint: str, gallery_dir: str = ""):
        self.params, self.config = load_checkpoint(checkpoint)
        if gallery_dir:
            self.gallery = load_dataset(gallery_dir, self.config.image_height, self.config.image_width, "gallery")
            feats = embed_images(self.gallery.images(), self.params, self.config)
            self.items = make_items(feats, self.gallery.identities, self.gallery.cameras)
        logger.info(f"Model ready: {self.params.count()} parameters, {len(self.items)} gallery images")

    def clear(self):
        self.__init__()


model = ModelState()


# --- Lifecycle Management ---
@contextlib.asynccontextmanager
async def lifespan(app: FastAPI):
    logger.info(f"✅ STADB v{__version__} starting...")
    if settings.CHECKPOINT:
        try:
            model.load(settings.CHECKPOINT, settings.GALLERY_DIR)
        except StadbError as e:
            # Service bleibt erreichbar, /model und /rank melden 503
            logger.error(f"❌ Checkpoint konnte nicht geladen werden: {e}")
    else:
        logger.warning("⚠️  Kein Checkpoint konfiguriert (STADB_CHECKPOINT)")

    yield

    logger.info(f"🛑 STADB v{__version__} stopping...")
    model.clear()


app = FastAPI(title="STADB", version=__version__, lifespan=lifespan)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_methods=["*"],
    allow_headers=["*"],
)

app.include_router(runs_router)


# --- Models ---
class RankRequest(BaseModel):
    path: str
    top_k: Optional[int] = None

class Match(BaseModel):
    rank: int
    path: Optional[str] = None
    identity: int
    camera: int
    distance: float

class RankResponse(BaseModel):
    query: str
    matches: List[Match]

class EvaluateRequest(BaseModel):
    query_dir: str
    k_max: Optional[int] = None


# ==========================================
# 🔧 HELPER
# ==========================================

def _require_model():
    if not model.loaded:
        raise HTTPException(503, "No model loaded")

def _require_gallery():
    _require_model()
    if not model.items:
        raise HTTPException(503, "No gallery loaded")

def _http_error(e: StadbError) -> HTTPException:
    if isinstance(e, (IngestionError, DimensionError, ContractError, EvaluationError)):
        return HTTPException(400, str(e))
    if isinstance(e, PersistenceError):
        return HTTPException(500, str(e))
    return HTTPException(500, f"{e.kind}: {e}")


# ==========================================
# 📡 REST Endpoints
# ==========================================

@app.get("/health")
def health():
    return {
        "name":          "STADB",
        "version":       __version__,
        "status":        "online",
        "model_loaded":  model.loaded,
        "gallery_size":  len(model.items),
    }

@app.get("/model")
def get_model():
    _require_model()
    return {
        "parameters":  model.params.count(),
        "tensors":     len(model.params),
        "num_classes": model.params.num_classes,
        "branches":    [tag.value for tag in model.params.branches()],
        "config":      model.config.model_dump(),
    }

@app.post("/rank", response_model=RankResponse)
def rank(request: RankRequest):
    _require_gallery()
    path = Path(request.path)
    if not path.is_file():
        raise HTTPException(404, f"Query image not found: {request.path}")
    try:
        image = image_from_file(path, model.config.image_height, model.config.image_width)
        try:
            identity, camera, _ = parse_filename(path.name)
        except IngestionError:
            identity, camera = UNKNOWN_IDENTITY, 0
        embedding = embed_images(image[None], model.params, model.config)[0]
        ranked = rank_and_filter(GalleryItem(embedding, identity, camera), model.items)
    except StadbError as e:
        raise _http_error(e)

    top_k = request.top_k or settings.K_MAX
    samples = model.gallery.samples
    return RankResponse(
        query=str(path),
        matches=[
            Match(rank=i + 1, path=samples[idx].path, identity=samples[idx].identity,
                  camera=samples[idx].camera, distance=dist)
            for i, (idx, dist) in enumerate(ranked[:top_k])
        ],
    )

@app.post("/evaluate")
def evaluate(request: EvaluateRequest):
    _require_gallery()
    if not Path(request.query_dir).is_dir():
        raise HTTPException(404, f"Query directory not found: {request.query_dir}")
    try:
        query = load_dataset(request.query_dir, model.config.image_height, model.config.image_width, "query")
        report = evaluate_model(model.params, model.config, query, model.gallery,
                                k_max=request.k_max or settings.K_MAX)
    except StadbError as e:
        raise _http_error(e)
    return {**report.summary(), "valid_queries": report.valid_queries}
