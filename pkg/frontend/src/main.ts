/** Browser bootstrap: wire the API client, feed, and rendering. */

import { ApiClient, EventFeed } from "./api.js";
import { render } from "./render.js";
import { UiState, emptyState, ingestSnapshot } from "./state.js";
import type { Hit } from "./types.js";

function controlBase(): string {
  const qs = new URLSearchParams(window.location.search);
  return qs.get("control") ?? "http://127.0.0.1:7777";
}

async function main(): Promise<void> {
  const root = document.getElementById("app");
  if (!root) throw new Error("missing #app");
  const client = new ApiClient(controlBase());
  const snap = await client.snapshot();
  const state: UiState = ingestSnapshot(emptyState(snap.self), snap);
  const feed = new EventFeed(client, state);

  const paint = () => { root.innerHTML = render(state); };
  paint();

  root.addEventListener("submit", (ev) => {
    const form = ev.target as HTMLFormElement;
    ev.preventDefault();
    const action = form.dataset["action"];
    const input = form.querySelector("input");
    const text = input?.value ?? "";
    if (!text) return;
    if (action === "say" && form.dataset["venue"]) {
      const vid = form.dataset["venue"];
      state.pendingChat.push({ venue_id: vid, body: text });
      paint();
      void client.postMessage(vid, text).catch(() => {
        state.pendingChat = state.pendingChat.filter(
          (p) => !(p.venue_id === vid && p.body === text));
        paint();
      });
    } else if (action === "search") {
      void client.search(text);
    }
    if (input) input.value = "";
  });

  root.addEventListener("click", (ev) => {
    const el = ev.target as HTMLElement;
    const action = el.dataset["action"];
    if (action === "join" && el.dataset["venue"]) {
      void client.joinVenue(el.dataset["venue"]);
    } else if (action === "fetch") {
      const qid = el.dataset["qid"];
      const entry = el.dataset["entry"];
      const hit = state.hits.get(qid ?? "")?.find(
        (h: Hit) => h.entry_id === entry);
      if (hit) void client.fetchHit(hit);
    }
  });

  for (;;) {
    try {
      const n = await feed.pump(15000);
      if (n > 0) paint();
    } catch {
      await new Promise((r) => setTimeout(r, 1000));
    }
  }
}

void main();
