import { ApiClient, ApiError } from "./api.js";
import {
  actionResolved,
  alertClosed,
  attemptResolved,
  bannerDismissed,
  bannerPushed,
  censusLoaded,
  encounterDataLoaded,
  encounterSelected,
  initialState,
  noticeDismissed,
  reasonPicked,
  renewalCandidate,
  type ConsoleState,
} from "./state.js";
import {
  renderBanners,
  renderCensus,
  renderHistory,
  renderLabsPanel,
  renderModal,
  renderNotice,
  renderOrders,
  renderPredictionPanel,
} from "./render.js";
import type { AlertAction } from "./types.js";

function apiBase(): string {
  const fromQuery = new URLSearchParams(window.location.search).get("api");
  return fromQuery ?? "http://127.0.0.1:8080";
}

const api = new ApiClient(apiBase());
let state: ConsoleState = initialState();

function update(next: ConsoleState): void {
  state = next;
  paint();
}

function fail(err: unknown): void {
  const text = err instanceof ApiError ? err.message : String(err);
  update(bannerPushed(state, text));
}

async function refreshCensus(): Promise<void> {
  try {
    const census = await api.census();
    update(censusLoaded(state, census.encounters));
  } catch (err) {
    fail(err);
  }
}

async function refreshEncounter(encounterId: string): Promise<void> {
  try {
    const [labs, prediction, orders] = await Promise.all([
      api.labs(encounterId),
      api.prediction(encounterId),
      api.orders(encounterId),
    ]);
    update(
      encounterDataLoaded(state, {
        labs: labs.results,
        prediction,
        orders: orders.orders,
      }),
    );
  } catch (err) {
    fail(err);
  }
}

async function selectEncounter(encounterId: string): Promise<void> {
  if (state.openAlert) return;
  update(encounterSelected(state, encounterId));
  await refreshEncounter(encounterId);
}

async function orderDailyCbc(): Promise<void> {
  const encounterId = state.selectedId;
  if (!encounterId || state.openAlert) return;
  try {
    const renewing = renewalCandidate(state.orders);
    const response = await api.attemptOrder(
      encounterId, "daily_or_higher", "console", renewing,
    );
    update(attemptResolved(state, response));
  } catch (err) {
    fail(err);
    return;
  }
  await refreshEncounter(encounterId);
  await refreshCensus(); // arm badge may have just been assigned
}

async function act(action: AlertAction, reason: string | null): Promise<void> {
  const alert = state.openAlert;
  if (!alert) return;
  try {
    const response = await api.alertAction(alert.eventId, action, reason);
    update(actionResolved(state, response));
  } catch (err) {
    // the modal stays open; the failure is surfaced, never swallowed
    fail(err);
    return;
  }
  await refreshEncounter(alert.encounterId);
}

async function closeModal(): Promise<void> {
  const alert = state.openAlert;
  if (!alert) return;
  try {
    await api.alertAction(alert.eventId, "cancelled_dialog", null);
    update(alertClosed(state));
  } catch (err) {
    fail(err);
    return;
  }
  await refreshEncounter(alert.encounterId);
}

function paint(): void {
  const app = document.getElementById("app");
  if (!app) return;
  app.replaceChildren();

  app.appendChild(renderBanners(state.banners, (i) => update(bannerDismissed(state, i))));
  const noticeArea = renderNotice(state.notice);
  noticeArea.addEventListener("click", () => update(noticeDismissed(state)));
  app.appendChild(noticeArea);

  const columns = document.createElement("div");
  columns.className = "columns";

  const left = document.createElement("div");
  left.className = "column";
  left.appendChild(
    renderCensus(state.encounters, state.selectedId, {
      onSelect: (id) => void selectEncounter(id),
    }),
  );
  columns.appendChild(left);

  const right = document.createElement("div");
  right.className = "column";
  if (state.selectedId) {
    const header = document.createElement("div");
    header.className = "encounter-header";
    const title = document.createElement("h2");
    title.textContent = state.selectedId;
    header.appendChild(title);
    const orderButton = document.createElement("button");
    orderButton.className = "order-daily";
    orderButton.textContent = "Order daily CBC";
    orderButton.disabled = state.openAlert != null;
    orderButton.addEventListener("click", () => void orderDailyCbc());
    header.appendChild(orderButton);
    right.appendChild(header);
    right.appendChild(renderPredictionPanel(state.prediction));
    right.appendChild(renderLabsPanel(state.labs));
    right.appendChild(renderOrders(state.orders));
  } else {
    const hint = document.createElement("p");
    hint.className = "hint";
    hint.textContent = "Select an encounter to review labs and place orders.";
    right.appendChild(hint);
  }
  right.appendChild(renderHistory(state));
  columns.appendChild(right);
  app.appendChild(columns);

  if (state.openAlert) {
    app.appendChild(
      renderModal(state.openAlert, {
        onAction: (action, reason) => void act(action, reason),
        onReasonPicked: (reason) => update(reasonPicked(state, reason)),
        onClose: () => void closeModal(),
      }),
    );
  }
}

paint();
void refreshCensus();
