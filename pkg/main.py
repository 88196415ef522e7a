"""
Main application entry point for the low-light detection service.
"""

import logging
from contextlib import asynccontextmanager
from typing import Optional

import uvicorn
from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

from src.api.detect_routes import DetectorHandle, detect_router
from src.config import configure_logging, settings
from src.exceptions import T2Error
from src.services.checkpoint_service import load_checkpoint

logger = logging.getLogger(__name__)


def load_detector(checkpoint_path: Optional[str]) -> Optional[DetectorHandle]:
    """Build the served detector from a checkpoint; ``None`` when unset or unreadable."""
    if not checkpoint_path:
        logger.warning("T2_CHECKPOINT is not set; /detect will answer 503")
        return None
    try:
        checkpoint = load_checkpoint(checkpoint_path)
    except T2Error as exc:
        logger.error("Cannot load detector: %s", exc)
        return None
    logger.info("Serving variant %s from %s", checkpoint.variant, checkpoint_path)
    return DetectorHandle(model=checkpoint.build(), eval_config=checkpoint.config.eval)


@asynccontextmanager
async def lifespan(app: FastAPI):
    """Application lifespan manager."""
    # Startup
    configure_logging()
    if getattr(app.state, "detector", None) is None:
        app.state.detector = load_detector(settings.T2_CHECKPOINT)

    yield

    # Shutdown
    app.state.detector = None


def create_app(detector: Optional[DetectorHandle] = None) -> FastAPI:
    """Create and configure the FastAPI application."""
    app = FastAPI(
        title="Low-Light Detection Service",
        description="Object detection on dark images via illumination/reflectance decomposition",
        version="1.0.0",
        lifespan=lifespan,
    )
    app.state.detector = detector

    # Add CORS middleware
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_credentials=True,
        allow_methods=["*"],
        allow_headers=["*"],
    )

    app.include_router(detect_router, tags=["Detection"])

    @app.get("/")
    async def root():
        return {
            "message": "Low-Light Detection Service API",
            "version": "1.0.0",
            "docs": "/docs",
        }

    return app


app = create_app()

if __name__ == "__main__":
    uvicorn.run(
        "main:app",
        host=settings.API_HOST,
        port=settings.API_PORT,
        reload=False,
    )
