#!/usr/bin/env python3
import os
import sys

from stadb.config import parse_config_text
from stadb.errors import StadbError

# Define colors for output
GREEN = "\033[92m"
YELLOW = "\033[93m"
RED = "\033[91m"
RESET = "\033[0m"

CONFIG_PATH = "stadb.conf"
ENV_PATH = os.path.join("stadb", ".env")


def print_step(msg):
    print(f"\n{GREEN}==>{RESET} {msg}")

def print_warn(msg):
    print(f"{YELLOW}⚠️  {msg}{RESET}")

def print_err(msg):
    print(f"{RED}❌ {msg}{RESET}")

def ask(question, default=None):
    prompt = f"{question}"
    if default:
        prompt += f" [{default}]"
    prompt += ": "

    val = input(prompt).strip()
    if not val and default:
        return default
    return val


def check_checkpoint(path):
    """(True, Beschreibung) wenn der Checkpoint lädt, sonst (False, Grund)."""
    from stadb.checkpoint import load_checkpoint

    if not os.path.isfile(path):
        return False, "Datei nicht gefunden"
    try:
        params, config = load_checkpoint(path)
    except StadbError as e:
        return False, f"{e.kind}: {e}"
    return True, f"{params.count()} Parameter, {params.num_classes} Identitäten, {config.image_height}×{config.image_width}"


def main():
    print(f"{GREEN}STADB Setup Assistant{RESET}")
    print("--------------------------------")

    # 1. Training
    print_step("Trainings-Konfiguration")
    while True:
        lines = [
            f"alpha = {ask('Drop-Schwelle alpha (Anteil vom Maximum)', '0.8')}",
            f"rho = {ask('Wahrscheinlichkeit Drop-Zweig rho', '0.25')}",
            f"epochs = {ask('Epochen', '50')}",
            f"image_height = {ask('Bildhöhe', '64')}",
            f"image_width = {ask('Bildbreite', '32')}",
            f"seed = {ask('Seed', '0')}",
        ]
        text = "# STADB Trainings-Konfiguration (setup.py)\n" + "\n".join(lines) + "\n"
        try:
            config = parse_config_text(text)
            break
        except StadbError as e:
            # Zeilennummer bezieht sich auf die erzeugte Datei, der Text nennt den Schlüssel
            print_err(f"Ungültiger Wert: {e}")
            retry = ask("Nochmal versuchen? (j/n)", "j")
            if retry.lower() != "j":
                sys.exit(2)

    # 2. Daten
    print_step("Datensatz")
    data_dir = ask("Datenverzeichnis (train/ query/ gallery/)", "data")
    if not os.path.isdir(data_dir):
        if ask("Nicht gefunden. Synthetischen Datensatz erzeugen? (j/n)", "j").lower() == "j":
            from stadb.dataset import generate_synthetic_dataset, write_dataset

            n_ids = int(ask("Anzahl Identitäten", "20"))
            index = generate_synthetic_dataset(n_ids, 8, 2, config.seed,
                                               config.image_height, config.image_width, split=True)
            counts = write_dataset(index, data_dir)
            print(f"   {GREEN}{len(index)} Bilder geschrieben: {counts}{RESET}")
        else:
            print_warn("Kein Datensatz vorhanden, Training erst nach 'python -m stadb synth' möglich")

    # 3. Service
    print_step("Inference Service")
    checkpoint = ask("Checkpoint für den Service (leer lassen für keinen)")
    if checkpoint:
        success, result = check_checkpoint(checkpoint)
        if success:
            print(f"   {GREEN}Checkpoint OK: {result}{RESET}")
        else:
            print_err(f"Checkpoint nicht nutzbar: {result}")
            if ask("Trotzdem eintragen? (j/n)", "n").lower() != "j":
                checkpoint = ""
    gallery = ask("Galerie-Verzeichnis", os.path.join(data_dir, "gallery"))
    runs_dir = ask("Verzeichnis der Trainingsläufe", "runs")
    port = ask("Port", "8000")

    # 4. Dateien schreiben
    print_step("Speichere Konfiguration...")

    env_content = f"""# Modell
STADB_CHECKPOINT={checkpoint}
STADB_GALLERY_DIR={gallery}

# Trainingsläufe
STADB_RUNS_DIR={runs_dir}

# Server
STADB_PORT={port}
"""

    try:
        with open(CONFIG_PATH, "w", encoding="utf-8") as f:
            f.write(config.dump())
        os.makedirs("stadb", exist_ok=True)
        with open(ENV_PATH, "w", encoding="utf-8") as f:
            f.write(env_content)
        print(f"   {GREEN}Konfiguration gespeichert in {CONFIG_PATH} und {ENV_PATH}{RESET}")
    except OSError as e:
        print_err(f"Konnte Datei nicht schreiben: {e}")
        sys.exit(3)

    print("\n✅ Setup abgeschlossen! Training starten mit:")
    print(f"   python -m stadb train --config {CONFIG_PATH} --data {data_dir} --out {runs_dir}/run1")

if __name__ == "__main__":
    try:
        main()
    except KeyboardInterrupt:
        print("\nAbgebrochen.")
