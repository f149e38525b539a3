from typing import Tuple
import hashlib
import hmac
import json
import logging
import multiprocessing
import os
from dataclasses import replace

import boto3
import boto3.session
import requests
import runpod
from boto3.s3.transfer import TransferConfig
from botocore.config import Config

from .formats import document_from_report, dump_plan, plan_to_dict, validate_scene, validate_task
from .logger import setup_logger
from .planner import plan
from .render import write_svgs

# Enforce a clean state after each job is done
# see https://docs.runpod.io/docs/handler-additional-controls#refresh-worker
REFRESH_WORKER = os.environ.get("REFRESH_WORKER", "false").lower() == "true"

# S3 Storage configuration
BUCKET_ACCESS_KEY_ID = os.environ.get("BUCKET_ACCESS_KEY_ID", None)
BUCKET_SECRET_ACCESS_KEY = os.environ.get("BUCKET_SECRET_ACCESS_KEY", None)
BUCKET_ENDPOINT_URL = os.environ.get("BUCKET_ENDPOINT_URL", False)
S3_REGION = os.environ.get("S3_REGION", None)
S3_BUCKET_NAME = os.environ.get("S3_BUCKET_NAME", None)

# Webhook configuration for plan notifications
RESULT_PLAN_WEBHOOK_URL = os.environ.get("RESULT_PLAN_WEBHOOK_URL")
RESULT_PLAN_WEBHOOK_SECRET = os.environ.get("RESULT_PLAN_WEBHOOK_SECRET")
WEBHOOK_VERIFY_SSL = os.environ.get("WEBHOOK_VERIFY_SSL", "true").lower() == "true"

# Where plan files and SVGs are written before upload
HMAP_OUTPUT_PATH = os.environ.get("HMAP_OUTPUT_PATH", "/tmp/hmap")

# Presigned URLs stay valid for a week
PRESIGNED_URL_EXPIRY_S = 604800

logger = logging.getLogger(__name__)


def validate_input(job_input):
    """
    Validates the input for the handler function.

    Args:
        job_input (dict | str): The job input, either a dict or its JSON encoding.

    Returns:
        tuple: A tuple containing the validated data and an error message, if any.
               The structure is (validated_data, error_message).
    """
    if job_input is None:
        logger.error("Input validation failed", extra={"error": "Please provide input"})
        return None, "Please provide input"

    if isinstance(job_input, str):
        try:
            job_input = json.loads(job_input)
        except json.JSONDecodeError:
            logger.error("Input validation failed", extra={"error": "Invalid JSON format in input"})
            return None, "Invalid JSON format in input"

    for key in ("scene", "task"):
        if not isinstance(job_input.get(key), dict):
            logger.error("Input validation failed", extra={"error": f"Missing '{key}' parameter"})
            return None, f"Missing '{key}' parameter"

    seed = job_input.get("seed")
    if seed is not None and (isinstance(seed, bool) or not isinstance(seed, int)):
        logger.error("Input validation failed", extra={"error": "'seed' must be an integer"})
        return None, "'seed' must be an integer"

    svg = job_input.get("svg", False)
    if not isinstance(svg, bool):
        logger.error("Input validation failed", extra={"error": "'svg' must be a boolean"})
        return None, "'svg' must be a boolean"

    validated = {
        "scene": job_input["scene"],
        "task": job_input["task"],
        "seed": seed,
        "svg": svg,
        "planJobId": job_input.get("planJobId"),
    }
    logger.info("Input validation succeeded", extra={"seed": seed, "svg": svg})
    return validated, None


def missing_s3_config():
    """
    Names of the S3 settings that are not configured.
    """
    settings = {
        "BUCKET_ENDPOINT_URL": BUCKET_ENDPOINT_URL,
        "BUCKET_ACCESS_KEY_ID": BUCKET_ACCESS_KEY_ID,
        "BUCKET_SECRET_ACCESS_KEY": BUCKET_SECRET_ACCESS_KEY,
        "S3_REGION": S3_REGION,
        "S3_BUCKET_NAME": S3_BUCKET_NAME,
    }
    return [name for name, value in settings.items() if not value]


def get_boto_client() -> Tuple[boto3.client, TransferConfig]:
    """
    Returns a boto3 client and transfer config for the bucket.
    """
    bucket_session = boto3.session.Session()

    boto_config = Config(
        signature_version="s3v4", retries={"max_attempts": 3, "mode": "standard"}
    )

    transfer_config = TransferConfig(
        multipart_threshold=1024 * 25,
        max_concurrency=multiprocessing.cpu_count(),
        multipart_chunksize=1024 * 25,
        use_threads=True,
    )

    boto_client = bucket_session.client(
        "s3",
        endpoint_url=BUCKET_ENDPOINT_URL,
        aws_access_key_id=BUCKET_ACCESS_KEY_ID,
        aws_secret_access_key=BUCKET_SECRET_ACCESS_KEY,
        config=boto_config,
        region_name=S3_REGION,
    )

    return boto_client, transfer_config


def upload_file(job_id, file_location, content_type):
    """
    Uploads one output file to bucket storage.

    Args:
        job_id (str): The job identifier, used as key prefix.
        file_location (str): Local path of the file.
        content_type (str): MIME type stored with the object.

    Returns:
        str: A presigned GET URL for the uploaded object.
    """
    boto_client, _ = get_boto_client()
    key = f"{job_id}/{os.path.basename(file_location)}"

    with open(file_location, "rb") as input_file:
        body = input_file.read()

    logger.info("Uploading file to bucket", extra={"bucket_name": S3_BUCKET_NAME, "job_id": job_id, "key": key})
    boto_client.put_object(Bucket=f"{S3_BUCKET_NAME}", Key=key, Body=body, ContentType=content_type)

    return boto_client.generate_presigned_url(
        "get_object",
        Params={"Bucket": f"{S3_BUCKET_NAME}", "Key": key},
        ExpiresIn=PRESIGNED_URL_EXPIRY_S,
    )


def send_result_to_webhook(summary, job_id, plan_job_id):
    """
    Posts a plan summary to the configured webhook with HMAC authentication.

    Args:
        summary (dict): Feasibility, metrics and URLs of the plan.
        job_id (str): The unique job identifier.
        plan_job_id (str): The caller's plan job identifier.

    Returns:
        bool: True if the webhook answered with a 2xx status, False otherwise.
    """
    if not plan_job_id:
        logger.warning("No plan job id provided, skipping webhook", extra={})
        return False

    if not RESULT_PLAN_WEBHOOK_URL or not RESULT_PLAN_WEBHOOK_SECRET:
        logger.warning("Webhook URL or secret not configured, skipping webhook", extra={})
        return False

    try:
        payload_json = json.dumps({"job_id": job_id, "planJobId": plan_job_id, **summary})

        signature = hmac.new(
            RESULT_PLAN_WEBHOOK_SECRET.encode(),
            payload_json.encode(),
            hashlib.sha256
        ).hexdigest()

        headers = {
            "Content-Type": "application/json",
            "X-Webhook-Signature": signature
        }

        response = requests.post(
            RESULT_PLAN_WEBHOOK_URL,
            data=payload_json,
            headers=headers,
            timeout=30,
            verify=WEBHOOK_VERIFY_SSL
        )

        return 200 <= response.status_code < 300

    except Exception as e:
        logger.error("Error sending plan to webhook", extra={"job_id": job_id, "error": str(e)})
        return False


def write_outputs(job_id, scene, doc, svg):
    """
    Writes the plan file, and the SVGs when requested, under HMAP_OUTPUT_PATH.

    Returns:
        tuple: (plan_path, overview_path or None)
    """
    directory = os.path.join(HMAP_OUTPUT_PATH, str(job_id))
    os.makedirs(directory, exist_ok=True)
    plan_path = os.path.join(directory, "plan.json")
    with open(plan_path, "w", encoding="utf-8") as f:
        f.write(dump_plan(doc))
    overview_path = None
    if svg:
        overview_path = write_svgs(scene, doc, os.path.join(directory, "svg"))[-1]
    return plan_path, overview_path


def handler(job):
    """
    Plans one manipulation task.

    Validates the scene and task, runs the planner and either uploads the plan
    file to S3 or returns it inline. A webhook is notified when planJobId is given.

    Args:
        job (dict): A dictionary containing job details and input parameters.

    Returns:
        dict: Either {"error": message} or {"result": ..., "refresh_worker": ...}.
    """
    try:
        setup_logger()
    except Exception as e:
        logger.error("Error setting up logger", extra={"error": str(e)})

    validated, error_message = validate_input(job.get("input"))
    if error_message:
        return {"error": error_message}

    loaded, error_message = validate_scene(validated["scene"])
    if error_message:
        logger.error("Scene validation failed", extra={"error": error_message})
        return {"error": error_message}
    scene, config = loaded

    spec, error_message = validate_task(validated["task"], scene)
    if error_message:
        logger.error("Task validation failed", extra={"error": error_message})
        return {"error": error_message}

    planner_config = spec.planner_config
    if validated["seed"] is not None:
        planner_config = replace(planner_config, seed=validated["seed"])

    try:
        report = plan(scene, spec.task, config, planner_config)
    except Exception as e:
        logger.error("Planner failed", extra={"error": str(e)})
        return {"error": f"Planner failed: {str(e)}"}

    doc = document_from_report(report, scene, spec.task, planner_config, record_timings=True)
    summary = {
        "feasible": report.feasible,
        "reason": report.reason,
        "metrics": doc.metrics,
    }
    logger.info("Planning finished", extra={"job_id": job["id"], **summary})

    missing = missing_s3_config()
    try:
        if missing:
            logger.warning("S3 configuration is incomplete, returning the plan inline", extra={"missing": missing})
            summary["plan"] = plan_to_dict(doc)
            if validated["svg"]:
                _, overview_path = write_outputs(job["id"], scene, doc, True)
                with open(overview_path, "r", encoding="utf-8") as f:
                    summary["overview_svg"] = f.read()
        else:
            plan_path, overview_path = write_outputs(job["id"], scene, doc, validated["svg"])
            summary["plan_url"] = upload_file(job["id"], plan_path, "application/json")
            if overview_path:
                summary["overview_url"] = upload_file(job["id"], overview_path, "image/svg+xml")
    except Exception as e:
        logger.error("Failed to store the plan", extra={"error": str(e)})
        return {"error": f"Failed to store the plan: {str(e)}"}

    if validated["planJobId"]:
        webhook_summary = {k: v for k, v in summary.items() if k not in ("plan", "overview_svg")}
        if send_result_to_webhook(webhook_summary, job["id"], validated["planJobId"]):
            logger.info("Plan sent to webhook", extra={"job_id": job["id"]})
        else:
            logger.warning("Failed to send plan to webhook", extra={"job_id": job["id"]})

    return {"result": summary, "refresh_worker": REFRESH_WORKER}


# Start the handler only if this module is run directly
if __name__ == "__main__":
    runpod.serverless.start({"handler": handler})
