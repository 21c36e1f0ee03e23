import json
import logging
import os

from dotenv import load_dotenv
from fastapi import BackgroundTasks, FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from fastapi.staticfiles import StaticFiles

from bench_orchestrator import OUTPUT_DIR, BenchConfig, __version__, run
from errors import MatrixCompletionError

load_dotenv()

logging.basicConfig(
    level=os.getenv("NNCOMPLETE_LOG_LEVEL", "INFO").upper(),
    format="%(asctime)s - %(levelname)s - %(message)s",
)
logger = logging.getLogger(__name__)

app = FastAPI(title="nncomplete API")

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

# File-based run registry
RUNS_DB_FILE = os.getenv("NNCOMPLETE_RUNS_DB", "bench_runs.json")


def load_db():
    if os.path.exists(RUNS_DB_FILE):
        with open(RUNS_DB_FILE, "r") as f:
            return json.load(f)
    return {}


def save_db(db):
    with open(RUNS_DB_FILE, "w") as f:
        json.dump(db, f, indent=4)


@app.post("/bench")
async def start_bench(config: BenchConfig, background_tasks: BackgroundTasks):
    db = load_db()
    if config.name in db and db[config.name]["status"] == "processing":
        raise HTTPException(status_code=400, detail="A bench run with this name is already in progress")

    db[config.name] = {
        "dataset": config.dataset,
        "estimators": config.estimators,
        "trials": config.trials,
        "status": "processing",
        "report_path": None,
        "summary": None,
    }
    save_db(db)

    background_tasks.add_task(run_bench, config)
    return {"message": "Bench started", "name": config.name}


def run_bench(config: BenchConfig):
    # Reports are served from OUTPUT_DIR, so the run always writes there.
    config = config.model_copy(update={"out": None})
    db = load_db()
    try:
        report = run(config)
        db[config.name]["status"] = "completed"
        db[config.name]["report_path"] = f"/reports/{config.name}/report.json"
        db[config.name]["summary"] = report.summary
    except (MatrixCompletionError, FileNotFoundError) as e:
        logger.error(f"Bench run {config.name} failed: {e}")
        db[config.name]["status"] = "failed"
        db[config.name]["error"] = str(e)
    save_db(db)


@app.get("/runs")
async def list_runs():
    db = load_db()
    # Pick up reports written by the CLI into the same output folder
    if os.path.exists(OUTPUT_DIR):
        for name in sorted(os.listdir(OUTPUT_DIR)):
            if name not in db and os.path.exists(os.path.join(OUTPUT_DIR, name, "report.json")):
                db[name] = {"status": "completed", "report_path": f"/reports/{name}/report.json"}
    return [{"name": k, **v} for k, v in db.items()]


@app.get("/status/{name}")
async def get_status(name: str):
    db = load_db()
    if name not in db:
        raise HTTPException(status_code=404, detail="Bench run not found")
    return db[name]


@app.get("/config")
async def get_config():
    return {"status": "ok", "version": __version__, "output_dir": OUTPUT_DIR}


os.makedirs(OUTPUT_DIR, exist_ok=True)
app.mount("/reports", StaticFiles(directory=OUTPUT_DIR), name="reports")

if __name__ == "__main__":
    import uvicorn

    uvicorn.run("server:app", host="0.0.0.0", port=8000, reload=True)
