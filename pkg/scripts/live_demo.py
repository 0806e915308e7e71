import json
import urllib.request
import urllib.error
from typing import Dict, Any

BASE_URL = "http://127.0.0.1:8000"

def print_step(step: str):
    print(f"\n{step}")

def print_step_result(message: str, payload: Any = None, success: bool = True):
    if success:
        print(f"SUCCESS\t-- {message}")
    else:
        print(f"ERROR\t-- {message}")
    if payload:
        print("\tResponse Payload:")
        print(json.dumps(payload, indent=2))

def make_request(method: str, url: str, data: Dict[str, Any] = None) -> Any:
    """Helper to make HTTP requests using standard library."""
    req = urllib.request.Request(url, method=method)
    req.add_header('Content-Type', 'application/json')

    if data:
        req.data = json.dumps(data).encode('utf-8')

    try:
        with urllib.request.urlopen(req) as response:
            return json.loads(response.read().decode())
    except urllib.error.HTTPError as e:
        print(f"ERROR\t-- HTTP Error {e.code}: {e.read().decode()}")
        return None
    except urllib.error.URLError as e:
        print(f"ERROR\t-- Connection Failed: {e.reason}")
        print("\t(Is the server running? Try: uvicorn app.main:app --reload)")
        exit(1)

def run_demo():
    print(f"STARTING -- Live API Demo against {BASE_URL}")

    print_step("1. Fetching the canonical posture set")
    canonical = make_request("GET", f"{BASE_URL}/postures/canonical?seed=0")
    if not canonical:
        print_step_result("Failed to fetch postures, exiting...", success=False)
        exit(1)
    postures = canonical["postures"]
    print_step_result(f"Fetched {len(postures)} postures: {', '.join(p['name'] for p in postures)}")

    print_step("2. Converting the first posture to features")
    first = postures[0]
    features = make_request("POST", f"{BASE_URL}/postures/features", {"pose": first["pose"]})
    print_step_result(f"Features of '{first['name']}'", payload=features)

    print_step("3. Scoring the two most similar postures")
    x_a = features["features"]
    x_b = make_request("POST", f"{BASE_URL}/postures/features", {"pose": postures[-1]["pose"]})["features"]
    x_c = make_request("POST", f"{BASE_URL}/postures/features", {"pose": postures[-2]["pose"]})["features"]
    near = make_request("POST", f"{BASE_URL}/postures/similarity", {"x_a": x_b, "x_b": x_c})
    far = make_request("POST", f"{BASE_URL}/postures/similarity", {"x_a": x_a, "x_b": x_b})
    print_step_result(f"Near copy: {near['lambda_total']:.3f}, unrelated pair: {far['lambda_total']:.3f}")

    print_step("4. Listing stored models")
    models = make_request("GET", f"{BASE_URL}/models")
    if not models:
        print_step_result("No models stored. Train one with: python -m app.cli run-virtual", success=False)
        print("\nDEMO COMPLETE")
        return
    print_step_result(f"Found {len(models)} models", payload=models)

    print_step("5. Predicting every canonical posture")
    model_id = models[0]["model_id"]
    correct = 0
    for posture in postures:
        result = make_request("POST", f"{BASE_URL}/models/{model_id}/predict", {"pose": posture["pose"]})
        correct += int(result["label"] == posture["label"])
        print(f"\t{posture['name']:<24} -> {result['label']}")
    print_step_result(f"Model '{model_id}' labelled {correct}/{len(postures)} postures correctly")

    print_step("6. Asking for a model that does not exist")
    try:
        urllib.request.urlopen(urllib.request.Request(
            f"{BASE_URL}/models/does-not-exist/predict", method="POST",
            data=json.dumps({"features": x_a}).encode('utf-8'),
            headers={'Content-Type': 'application/json'}))
    except urllib.error.HTTPError as e:
        if e.code == 404:
            print_step_result("Received 404 as expected")
        else:
            print_step_result(f"Unexpected status {e.code}", success=False)

    print("\nDEMO COMPLETE")

if __name__ == "__main__":
    run_demo()
