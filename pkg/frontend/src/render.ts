import type {
  AlertAction,
  CensusRow,
  LabResultRow,
  OrderSummary,
  PredictionResponse,
} from "./types.js";
import {
  ACTION_LABELS,
  OPTION_TO_ACTION,
  STALE_BADGE_H,
  canSubmit,
  type ConsoleState,
  type OpenAlert,
} from "./state.js";

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

function badge(text: string, kind: string): HTMLSpanElement {
  return el("span", `badge badge-${kind}`, text);
}

export function formatProbability(p: number): string {
  return `${(p * 100).toFixed(1)}%`;
}

export interface CensusHandlers {
  onSelect: (encounterId: string) => void;
}

export function renderCensus(
  rows: CensusRow[],
  selectedId: string | null,
  handlers: CensusHandlers,
): HTMLElement {
  const root = el("section", "census");
  root.appendChild(el("h2", undefined, "Admitted encounters"));
  const table = el("table", "census-table");
  const head = el("tr");
  for (const label of ["Encounter", "Unit", "Age", "Sex", "Stability", "Arm"]) {
    head.appendChild(el("th", undefined, label));
  }
  table.appendChild(head);
  for (const row of rows) {
    const tr = el("tr", row.encounter_id === selectedId ? "selected" : undefined);
    tr.dataset["encounterId"] = row.encounter_id;
    tr.appendChild(el("td", undefined, row.encounter_id));
    tr.appendChild(el("td", undefined, row.unit ?? ""));
    tr.appendChild(el("td", undefined, row.age != null ? String(row.age) : ""));
    tr.appendChild(el("td", undefined, row.sex ?? ""));
    const stability = el("td", "stability");
    if (row.panel_probability != null) {
      stability.appendChild(
        el("span", "probability", formatProbability(row.panel_probability)),
      );
      if (row.staleness_h != null && row.staleness_h > STALE_BADGE_H) {
        stability.appendChild(
          badge(`stale ${row.staleness_h.toFixed(1)}h`, "stale"),
        );
      }
    } else {
      stability.appendChild(el("span", "no-prediction", "no prediction"));
    }
    tr.appendChild(stability);
    const armCell = el("td");
    if (row.arm) armCell.appendChild(badge(row.arm, `arm-${row.arm}`));
    tr.appendChild(armCell);
    tr.addEventListener("click", () => handlers.onSelect(row.encounter_id));
    table.appendChild(tr);
  }
  root.appendChild(table);
  return root;
}

/** One polyline per component over its values in time order; the newest
 * value is printed next to it, flagged when the API marked it abnormal. */
export function renderLabsPanel(labs: LabResultRow[]): HTMLElement {
  const root = el("section", "labs");
  root.appendChild(el("h2", undefined, "Recent results"));
  const byComponent = new Map<string, LabResultRow[]>();
  for (const row of labs) {
    const list = byComponent.get(row.component) ?? [];
    list.push(row);
    byComponent.set(row.component, list);
  }
  for (const [component, rows] of byComponent) {
    const line = el("div", "lab-line");
    line.dataset["component"] = component;
    line.appendChild(el("span", "lab-name", component));
    line.appendChild(sparkline(rows.map((r) => r.value)));
    const latest = rows[rows.length - 1];
    if (latest) {
      line.appendChild(
        el(
          "span",
          latest.abnormal ? "lab-value abnormal" : "lab-value",
          String(latest.value),
        ),
      );
    }
    root.appendChild(line);
  }
  return root;
}

function sparkline(values: number[]): SVGSVGElement {
  const svg = document.createElementNS("http://www.w3.org/2000/svg", "svg");
  const width = 120;
  const height = 24;
  svg.setAttribute("width", String(width));
  svg.setAttribute("height", String(height));
  svg.setAttribute("class", "sparkline");
  if (values.length > 1) {
    const min = Math.min(...values);
    const max = Math.max(...values);
    const span = max - min || 1;
    const step = width / (values.length - 1);
    const points = values
      .map((v, i) => `${(i * step).toFixed(1)},${(height - 2 - ((v - min) / span) * (height - 4)).toFixed(1)}`)
      .join(" ");
    const line = document.createElementNS("http://www.w3.org/2000/svg", "polyline");
    line.setAttribute("points", points);
    line.setAttribute("fill", "none");
    svg.appendChild(line);
  }
  return svg;
}

export function renderPredictionPanel(
  prediction: PredictionResponse | null,
): HTMLElement {
  const root = el("section", "prediction");
  root.appendChild(el("h2", undefined, "Latest prediction"));
  if (!prediction) {
    root.appendChild(el("p", "no-prediction", "No prediction yet."));
    return root;
  }
  const p = prediction.prediction;
  const line = el("p", "prediction-line");
  line.appendChild(
    el("span", "probability", formatProbability(p.panel_probability)),
  );
  line.appendChild(el("span", "model-version", p.model_version));
  if (prediction.staleness_h > STALE_BADGE_H) {
    line.appendChild(badge(`stale ${prediction.staleness_h.toFixed(1)}h`, "stale"));
  } else {
    line.appendChild(
      el("span", "staleness", `${prediction.staleness_h.toFixed(1)}h old`),
    );
  }
  root.appendChild(line);
  return root;
}

export function renderOrders(orders: OrderSummary[]): HTMLElement {
  const root = el("section", "orders");
  root.appendChild(el("h2", undefined, "Standing orders"));
  const table = el("table", "orders-table");
  const head = el("tr");
  for (const label of ["Order", "Panel", "Frequency", "Status"]) {
    head.appendChild(el("th", undefined, label));
  }
  table.appendChild(head);
  for (const order of orders) {
    const tr = el("tr", `status-${order.status}`);
    tr.dataset["orderId"] = order.order_id;
    tr.appendChild(el("td", undefined, order.order_id));
    tr.appendChild(el("td", undefined, order.panel));
    tr.appendChild(el("td", undefined, order.frequency));
    tr.appendChild(el("td", "status", order.status));
    table.appendChild(tr);
  }
  root.appendChild(table);
  return root;
}

export interface ModalHandlers {
  onAction: (action: AlertAction, reason: string | null) => void;
  onReasonPicked: (reason: string | null) => void;
  onClose: () => void;
}

/** The interruptive alert dialog: probability statement, three-column
 * recent-results grid with abnormal cells flagged, the four actions, and
 * the acknowledge-reason picker that gates the acknowledge button. */
export function renderModal(
  alert: OpenAlert,
  handlers: ModalHandlers,
): HTMLElement {
  const backdrop = el("div", "modal-backdrop");
  const modal = el("div", "modal");
  modal.setAttribute("role", "dialog");
  modal.setAttribute("aria-modal", "true");

  const close = el("button", "modal-close", "×");
  close.addEventListener("click", () => handlers.onClose());
  modal.appendChild(close);

  modal.appendChild(el("h2", "modal-headline", alert.payload.headline));
  const statement = el("p", "probability-statement");
  statement.textContent =
    `This patient's next CBC is predicted stable with probability ` +
    `${formatProbability(alert.payload.panel_probability)}. ` +
    `Repetitive daily CBCs may not add information.`;
  modal.appendChild(statement);

  const learnMore = el("a", "learn-more", "Learn more");
  learnMore.setAttribute("href", alert.payload.info_link);
  learnMore.setAttribute("target", "_blank");
  modal.appendChild(learnMore);

  const grid = el("table", "results-grid");
  const head = el("tr");
  head.appendChild(el("th", undefined, "Component"));
  for (const label of ["Most recent", "Previous", "Prior"]) {
    head.appendChild(el("th", undefined, label));
  }
  grid.appendChild(head);
  for (const [component, cells] of Object.entries(alert.payload.components)) {
    const tr = el("tr");
    tr.dataset["component"] = component;
    tr.appendChild(el("td", "component-name", component));
    for (let i = 0; i < 3; i++) {
      const cell = cells[i];
      if (cell) {
        const td = el("td", cell.abnormal ? "result abnormal" : "result",
                      String(cell.value));
        td.title = cell.observed_at;
        tr.appendChild(td);
      } else {
        tr.appendChild(el("td", "result empty", "—"));
      }
    }
    grid.appendChild(tr);
  }
  modal.appendChild(grid);

  const reasonRow = el("div", "reason-row");
  const picker = el("select", "reason-picker");
  const placeholder = el("option", undefined, "Acknowledge reason…");
  placeholder.setAttribute("value", "");
  picker.appendChild(placeholder);
  for (const reason of alert.payload.acknowledge_reasons) {
    const option = el("option", undefined, reason);
    option.setAttribute("value", reason);
    picker.appendChild(option);
  }
  if (alert.selectedReason) picker.value = alert.selectedReason;
  picker.addEventListener("change", () =>
    handlers.onReasonPicked(picker.value || null),
  );
  reasonRow.appendChild(picker);
  modal.appendChild(reasonRow);

  const actions = el("div", "modal-actions");
  for (const option of alert.payload.options) {
    const action = OPTION_TO_ACTION[option];
    if (!action) continue;
    const button = el("button", "action", ACTION_LABELS[action]);
    button.dataset["action"] = action;
    if (!canSubmit(alert, action)) button.disabled = true;
    button.addEventListener("click", () =>
      handlers.onAction(action, alert.selectedReason),
    );
    actions.appendChild(button);
  }
  modal.appendChild(actions);

  backdrop.appendChild(modal);
  return backdrop;
}

export function renderBanners(
  banners: string[],
  onDismiss: (index: number) => void,
): HTMLElement {
  const root = el("div", "banners");
  banners.forEach((text, index) => {
    const banner = el("div", "banner");
    banner.appendChild(el("span", undefined, text));
    const dismiss = el("button", "dismiss", "dismiss");
    dismiss.addEventListener("click", () => onDismiss(index));
    banner.appendChild(dismiss);
    root.appendChild(banner);
  });
  return root;
}

export function renderNotice(notice: string | null): HTMLElement {
  const root = el("div", "notice-area");
  if (notice) root.appendChild(el("div", "notice", notice));
  return root;
}

export function renderHistory(state: ConsoleState): HTMLElement {
  const root = el("section", "history");
  root.appendChild(el("h2", undefined, "Action history"));
  const list = el("ul");
  for (const record of state.history) {
    const item = el(
      "li",
      undefined,
      `${record.encounterId}: ${ACTION_LABELS[record.action]}` +
        (record.reason ? ` (${record.reason})` : "") +
        ` -> ${record.survivingOrderId}`,
    );
    list.appendChild(item);
  }
  root.appendChild(list);
  return root;
}
